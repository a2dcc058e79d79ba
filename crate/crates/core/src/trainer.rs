//! Mini-batch gradient descent on mean squared error, plus a finite
//! difference check of the backpropagated gradient.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{ActivationKind, LayerWeights, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[p, n_1, ..., n_{L-1}, 1]`.
    pub layer_dims: Vec<usize>,
    pub activation: ActivationKind,
}

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], activation: ActivationKind) -> Self {
        let mut layer_dims = vec![input];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(1);
        Self {
            layer_dims,
            activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases zero.
    UniformHe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub init: Init,
    /// Rescale each mini-batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            optimizer: Optimizer::SgdMomentum { beta: 0.9 },
            init: Init::UniformHe,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate must be finite and > 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::param("grad_clip must be finite and > 0"));
            }
        }
        if let Optimizer::SgdMomentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::param("momentum beta must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

/// Seeded initial weights.
pub fn init_network(arch: &Architecture, init: Init, seed: u64) -> Result<Network> {
    let mut net = Network::zeros(&arch.layer_dims, arch.activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::UniformHe => {
            for layer in &mut net.layers {
                let fan_in = layer.n_in();
                let bound = (6.0 / fan_in as f64).sqrt();
                for j in 0..layer.n_out() {
                    for i in 0..fan_in {
                        layer.weights[(j, i)] = rng.random_range(-bound..bound);
                    }
                }
            }
        }
    }
    Ok(net)
}

pub fn mse(net: &Network, data: &Dataset) -> Result<f64> {
    let pred = net.predict(&data.features)?;
    Ok((pred - &data.targets).norm_squared() / data.n_rows() as f64)
}

/// Gradient of the mean squared error over all rows of `x`, one matrix per
/// layer shaped like its weights. Masked slots get zero gradient.
pub fn gradient(net: &Network, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            context: "training targets",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let trace = net.trace_matrix(x)?;
    let depth = net.depth();
    let b = x.nrows() as f64;
    let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    let mut dz: DMatrix<f64> = (trace.output(depth) - DMatrix::from_column_slice(y.len(), 1, y.as_slice()))
        * (2.0 / b);
    for k in (1..=depth).rev() {
        let layer = &net.layers[k - 1];
        let a = trace.output(k - 1);
        let n_in = layer.n_in();
        let mut g = DMatrix::zeros(layer.n_out(), n_in + 1);
        g.columns_mut(0, n_in).copy_from(&dz.tr_mul(a));
        for (j, col) in dz.column_iter().enumerate() {
            g[(j, n_in)] = col.sum();
        }
        for (v, m) in g.iter_mut().zip(layer.mask.iter()) {
            if *m {
                *v = 0.0;
            }
        }
        if k > 1 {
            let mut da = &dz * layer.weights.columns(0, n_in);
            let pre = trace.pre_activation(k - 1);
            da.zip_apply(pre, |d, z| *d *= net.activation.derivative(z));
            dz = da;
        }
        grads.push(g);
    }
    grads.reverse();
    Ok(grads)
}

/// Trains a network with the given architecture; see [`train_with_log`].
pub fn train(arch: &Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    train_with_log(arch, data, None, cfg).map(|(net, _)| net)
}

/// Mini-batch SGD (optionally with momentum) with seeded per-epoch shuffling.
/// Full-batch training MSE (and validation MSE when given) is recorded after
/// every epoch; a non-finite loss aborts with [`Error::Divergence`].
pub fn train_with_log(
    arch: &Architecture,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochRecord>)> {
    cfg.validate()?;
    if arch.layer_dims.first() != Some(&data.n_features()) {
        return Err(Error::Dimension {
            context: "architecture input width",
            expected: data.n_features(),
            got: arch.layer_dims.first().copied().unwrap_or(0),
        });
    }
    let mut net = init_network(arch, cfg.init, cfg.seed)?;
    // separate stream for shuffling so init and order are independent
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let n = data.n_rows();
    let p = data.n_features();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity: Vec<DMatrix<f64>> = net
        .layers
        .iter()
        .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = DMatrix::from_fn(batch.len(), p, |i, j| data.features[(batch[i], j)]);
            let yb = DVector::from_fn(batch.len(), |i, _| data.targets[batch[i]]);
            let mut grads = gradient(&net, &xb, &yb)?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            step(&mut net.layers, &mut velocity, &grads, cfg);
        }
        let train_mse = mse(&net, data)?;
        if !train_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_mse,
            });
        }
        let val_mse = val.map(|v| mse(&net, v)).transpose()?;
        log.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
    }
    Ok((net, log))
}

fn clip_global_norm(grads: &mut [DMatrix<f64>], max_norm: f64) {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            *g *= scale;
        }
    }
}

fn step(layers: &mut [LayerWeights], velocity: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], cfg: &TrainConfig) {
    for ((layer, vel), g) in layers.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        match cfg.optimizer {
            Optimizer::Sgd => layer.weights -= g * cfg.learning_rate,
            Optimizer::SgdMomentum { beta } => {
                *vel *= beta;
                *vel += g;
                layer.weights -= &*vel * cfg.learning_rate;
            }
        }
        layer.apply_mask();
    }
}

/// Writes `epoch,train_mse,val_mse` rows.
pub fn write_log_csv(log: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for r in log {
        let val = r.val_mse.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, val));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Floor on the denominator of the relative error so that gradients at
/// rounding-noise level do not dominate.
const REL_FLOOR: f64 = 1e-6;

/// Compares the backpropagated gradient with central differences
/// `(L(w + eps) - L(w - eps)) / 2 eps` on every unmasked weight and returns the
/// largest relative discrepancy `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn grad_check(net: &Network, data: &Dataset, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon must be > 0"));
    }
    let analytic = gradient(net, &data.features, &data.targets)?;
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for k in 0..net.depth() {
        let (rows, cols) = net.layers[k].weights.shape();
        for r in 0..rows {
            for c in 0..cols {
                if net.layers[k].mask[(r, c)] {
                    continue;
                }
                let w0 = net.layers[k].weights[(r, c)];
                probe.layers[k].weights[(r, c)] = w0 + epsilon;
                let up = mse(&probe, data)?;
                probe.layers[k].weights[(r, c)] = w0 - epsilon;
                let down = mse(&probe, data)?;
                probe.layers[k].weights[(r, c)] = w0;
                let numeric = (up - down) / (2.0 * epsilon);
                let a = analytic[k][(r, c)];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
