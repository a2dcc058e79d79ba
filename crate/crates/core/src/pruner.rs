//! Adaptive backward pruning.
//!
//! Layers are visited from the output back to the first hidden layer. Every
//! neuron's linear part `g_j^(k)` is re-fitted as a sparse linear combination
//! of the previous layer's outputs `f^(k-1)` (constant neuron included),
//! always using the activations of the original, unpruned network. Two
//! re-fitting rules are available: magnitude selection with a keep-count from
//! the sparsity index followed by least squares, or a LASSO fit. A
//! fixed-proportion magnitude baseline without re-fitting is provided for
//! comparison.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::solvers::{Design, LassoConfig, TargetStats};
use crate::sparsity::{achieved_tail_ratio, keep_count, l0_norm, top_m_indices};
use crate::trainer::mse;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Keep-count from the sparsity index, top-magnitude support, OLS re-fit.
    AbpM { q: f64, eta: f64 },
    /// LASSO re-fit on all inputs.
    AbpL { lasso: LassoConfig },
    /// Zero the `floor(p * d)` smallest incoming weights of every neuron.
    BaselineMag { p: f64 },
}

impl PruneStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PruneStrategy::AbpM { q, eta } => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::param(format!("q must lie in (0, 1), got {q}")));
                }
                if !(eta >= 0.0) || !eta.is_finite() {
                    return Err(Error::param(format!("eta must be finite and >= 0, got {eta}")));
                }
                Ok(())
            }
            PruneStrategy::AbpL { lasso } => lasso.validate(),
            PruneStrategy::BaselineMag { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::param(format!("p must lie in [0, 1), got {p}")));
                }
                Ok(())
            }
        }
    }

    /// Short method name used in reports.
    pub fn method(&self) -> &'static str {
        match self {
            PruneStrategy::AbpM { .. } => "ABP-M",
            PruneStrategy::AbpL { .. } => "ABP-L",
            PruneStrategy::BaselineMag { .. } => "Mag",
        }
    }

    /// Hyper-parameters in a compact `key=value` form.
    pub fn params(&self) -> String {
        match self {
            PruneStrategy::AbpM { q, eta } => format!("eta={eta} q={q}"),
            PruneStrategy::AbpL { lasso } => format!("lambda={:e}", lasso.lambda),
            PruneStrategy::BaselineMag { p } => format!("p={p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronPruneRecord {
    /// 1-based layer index `k`.
    pub layer: usize,
    pub neuron: usize,
    pub original_nonzeros: usize,
    pub kept: usize,
    pub support: Vec<usize>,
    /// Dense, zero off the support.
    pub new_weights: Vec<f64>,
    /// Mean squared residual against the original `g_j^(k)` on the pruning
    /// rows; absent for the baseline, which does not look at data.
    pub refit_mse: Option<f64>,
    /// Realized tail ratio of the kept set (ABP-M only).
    pub achieved_eta: Option<f64>,
    /// Solver convergence flag (ABP-L only).
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub strategy: PruneStrategy,
    /// In processing order: last layer first, neurons ascending.
    pub records: Vec<NeuronPruneRecord>,
    pub total_params: usize,
    pub kept_params: usize,
    /// `None` when nothing survives.
    pub network_compression_ratio: Option<f64>,
    pub network_pruning_ratio: f64,
}

impl PruneReport {
    fn from_records(strategy: PruneStrategy, records: Vec<NeuronPruneRecord>, pruned: &Network) -> Self {
        let (total, kept) = pruned.count_params();
        Self {
            strategy,
            records,
            total_params: total,
            kept_params: kept,
            network_compression_ratio: (kept > 0).then(|| total as f64 / kept as f64),
            network_pruning_ratio: 1.0 - kept as f64 / total as f64,
        }
    }

    /// Layers in the order they were processed, deduplicated.
    pub fn layer_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = Vec::new();
        for r in &self.records {
            if order.last() != Some(&r.layer) {
                order.push(r.layer);
            }
        }
        order
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-neuron summary rows
    /// `layer,neuron,original_nonzeros,kept,refit_mse,achieved_eta`.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("layer,neuron,original_nonzeros,kept,refit_mse,achieved_eta\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer,
                r.neuron,
                r.original_nonzeros,
                r.kept,
                opt(r.refit_mse),
                opt(r.achieved_eta)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    /// Use a seeded random subset of at most this many rows for re-fitting.
    pub max_rows: Option<usize>,
    pub seed: u64,
}

/// Regression problems for every layer of a network, built once from the
/// original network's activations and reusable across strategies.
pub struct PruneContext {
    original: Network,
    /// `designs[k - 1]`: `[f^(k-1) | 1]` for re-fitting layer `k`.
    designs: Vec<Design>,
    /// `targets[k - 1]`: `g^(k)`, one column per neuron.
    targets: Vec<DMatrix<f64>>,
}

impl PruneContext {
    pub fn new(net: &Network, data: &Dataset, opts: PruneOptions) -> Result<Self> {
        net.validate()?;
        if data.n_rows() == 0 {
            return Err(Error::param("pruning needs at least one data row"));
        }
        let x = match opts.max_rows {
            Some(cap) if cap < data.n_rows() => {
                if cap == 0 {
                    return Err(Error::param("max_rows must be >= 1"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                let mut rows = sample(&mut rng, data.n_rows(), cap).into_vec();
                rows.sort_unstable();
                data.select_rows(&rows).features
            }
            _ => data.features.clone(),
        };
        let trace = net.trace_matrix(&x)?;
        let designs = (0..net.depth())
            .map(|k| Design::new(trace.design(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            original: net.clone(),
            designs,
            targets: trace.pre_activations,
        })
    }

    pub fn original(&self) -> &Network {
        &self.original
    }

    /// Runs the backward procedure with an ABP strategy.
    pub fn prune(&self, strategy: PruneStrategy) -> Result<(Network, PruneReport)> {
        strategy.validate()?;
        if let PruneStrategy::BaselineMag { .. } = strategy {
            return Err(Error::param(
                "the magnitude baseline is not an adaptive strategy; use prune_baseline",
            ));
        }
        let mut pruned = self.original.clone();
        let mut records = Vec::new();
        for k in (1..=self.original.depth()).rev() {
            let design = &self.designs[k - 1];
            let targets = &self.targets[k - 1];
            let layer = &self.original.layers[k - 1];
            let layer_records = (0..layer.n_out())
                .into_par_iter()
                .map(|j| {
                    let y = targets.column(j).into_owned();
                    let stats = design.target_stats(&y)?;
                    let mut rec = match strategy {
                        PruneStrategy::AbpM { q, eta } => {
                            fit_magnitude(design, &stats, &y, &layer.row(j), q, eta)?
                        }
                        PruneStrategy::AbpL { lasso } => fit_lasso(design, &stats, &y, &lasso)?,
                        PruneStrategy::BaselineMag { .. } => unreachable!(),
                    };
                    rec.layer = k;
                    rec.neuron = j;
                    rec.original_nonzeros = l0_norm(&layer.row(j));
                    Ok(rec)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = &mut pruned.layers[k - 1];
            for rec in &layer_records {
                write_row(out, rec.neuron, &rec.new_weights, &rec.support);
            }
            records.extend(layer_records);
        }
        pruned.validate()?;
        let report = PruneReport::from_records(strategy, records, &pruned);
        Ok((pruned, report))
    }
}

fn write_row(
    layer: &mut crate::network::LayerWeights,
    j: usize,
    weights: &[f64],
    support: &[usize],
) {
    let mut keep = vec![false; weights.len()];
    for &i in support {
        keep[i] = true;
    }
    for (i, w) in weights.iter().enumerate() {
        layer.weights[(j, i)] = if keep[i] { *w } else { 0.0 };
        layer.mask[(j, i)] = !keep[i];
    }
}

fn fit_magnitude(
    design: &Design,
    stats: &TargetStats,
    y: &DVector<f64>,
    w: &[f64],
    q: f64,
    eta: f64,
) -> Result<NeuronPruneRecord> {
    let d = w.len();
    if w.iter().all(|v| *v == 0.0) {
        return Ok(NeuronPruneRecord {
            layer: 0,
            neuron: 0,
            original_nonzeros: 0,
            kept: 0,
            support: Vec::new(),
            new_weights: vec![0.0; d],
            refit_mse: Some(design.mse(y, &vec![0.0; d])),
            achieved_eta: Some(0.0),
            converged: None,
        });
    }
    let m = keep_count(w, q, eta)?;
    let support = top_m_indices(w, m);
    let new_weights = design.ols_subset(stats, &support);
    Ok(NeuronPruneRecord {
        layer: 0,
        neuron: 0,
        original_nonzeros: l0_norm(w),
        kept: support.len(),
        refit_mse: Some(design.mse(y, &new_weights)),
        achieved_eta: Some(achieved_tail_ratio(w, m, q)),
        support,
        new_weights,
        converged: None,
    })
}

fn fit_lasso(
    design: &Design,
    stats: &TargetStats,
    y: &DVector<f64>,
    cfg: &LassoConfig,
) -> Result<NeuronPruneRecord> {
    let path = design.lasso(stats, cfg)?;
    let support: Vec<usize> = (0..path.weights.len()).filter(|&i| path.weights[i] != 0.0).collect();
    Ok(NeuronPruneRecord {
        layer: 0,
        neuron: 0,
        original_nonzeros: 0,
        kept: support.len(),
        refit_mse: Some(design.mse(y, &path.weights)),
        achieved_eta: None,
        converged: Some(path.converged),
        support,
        new_weights: path.weights,
    })
}

fn check_neuron_problem(features: &DMatrix<f64>, targets: &DVector<f64>) -> Result<()> {
    if features.nrows() != targets.len() {
        return Err(Error::Dimension {
            context: "neuron regression targets",
            expected: features.nrows(),
            got: targets.len(),
        });
    }
    Ok(())
}

/// Magnitude-based sparse approximation of one neuron with incoming weights
/// `w` over the columns of `features`.
pub fn approx_neuron_magnitude(
    w: &[f64],
    features: &DMatrix<f64>,
    targets: &DVector<f64>,
    q: f64,
    eta: f64,
) -> Result<NeuronPruneRecord> {
    PruneStrategy::AbpM { q, eta }.validate()?;
    check_neuron_problem(features, targets)?;
    if w.len() != features.ncols() {
        return Err(Error::Dimension {
            context: "neuron weight vector",
            expected: features.ncols(),
            got: w.len(),
        });
    }
    let design = Design::new(features.clone())?;
    let stats = design.target_stats(targets)?;
    let mut rec = fit_magnitude(&design, &stats, targets, w, q, eta)?;
    rec.original_nonzeros = l0_norm(w);
    Ok(rec)
}

/// LASSO-based sparse approximation of one neuron.
pub fn approx_neuron_lasso(
    features: &DMatrix<f64>,
    targets: &DVector<f64>,
    cfg: &LassoConfig,
) -> Result<NeuronPruneRecord> {
    cfg.validate()?;
    check_neuron_problem(features, targets)?;
    let design = Design::new(features.clone())?;
    let stats = design.target_stats(targets)?;
    fit_lasso(&design, &stats, targets, cfg)
}

/// Backward pruning of `net` with an adaptive strategy, re-fitting on all
/// rows of `data`. The input network is not modified.
pub fn prune_abp(net: &Network, data: &Dataset, strategy: PruneStrategy) -> Result<(Network, PruneReport)> {
    strategy.validate()?;
    if let PruneStrategy::BaselineMag { .. } = strategy {
        return Err(Error::param(
            "the magnitude baseline is not an adaptive strategy; use prune_baseline",
        ));
    }
    PruneContext::new(net, data, PruneOptions::default())?.prune(strategy)
}

/// Per neuron, zeroes the `floor(p * d)` smallest-magnitude incoming weights
/// (constant-neuron weight included) and leaves the survivors untouched.
/// Among equal magnitudes the lower index survives.
pub fn prune_baseline(net: &Network, p: f64) -> Result<(Network, PruneReport)> {
    let strategy = PruneStrategy::BaselineMag { p };
    strategy.validate()?;
    net.validate()?;
    let mut pruned = net.clone();
    let mut records = Vec::new();
    for k in (1..=net.depth()).rev() {
        let layer = &net.layers[k - 1];
        let d = layer.weights.ncols();
        let drop = (p * d as f64).floor() as usize;
        for j in 0..layer.n_out() {
            let w = layer.row(j);
            let keep = top_m_indices(&w, d - drop);
            let out = &mut pruned.layers[k - 1];
            let mut kept_mask = vec![false; d];
            for &i in &keep {
                kept_mask[i] = true;
            }
            for i in 0..d {
                if !kept_mask[i] {
                    out.weights[(j, i)] = 0.0;
                    out.mask[(j, i)] = true;
                }
            }
            let new_weights: Vec<f64> = out.weights.row(j).iter().copied().collect();
            let support: Vec<usize> = (0..d).filter(|&i| new_weights[i] != 0.0).collect();
            records.push(NeuronPruneRecord {
                layer: k,
                neuron: j,
                original_nonzeros: l0_norm(&w),
                kept: support.len(),
                support,
                new_weights,
                refit_mse: None,
                achieved_eta: None,
                converged: None,
            });
        }
    }
    let report = PruneReport::from_records(strategy, records, &pruned);
    Ok((pruned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse_original: f64,
    pub mse_pruned: f64,
    /// `(mse_pruned - mse_original) / mse_original`; negative when pruning
    /// helps.
    pub mse_increase_ratio: f64,
}

pub fn evaluate_pruned(original: &Network, pruned: &Network, data: &Dataset) -> Result<Evaluation> {
    if original.layer_dims() != pruned.layer_dims() {
        return Err(Error::param("original and pruned networks differ in architecture"));
    }
    let mse_original = mse(original, data)?;
    let mse_pruned = mse(pruned, data)?;
    mse_increase_ratio(mse_original, mse_pruned).map(|mse_increase_ratio| Evaluation {
        mse_original,
        mse_pruned,
        mse_increase_ratio,
    })
}

pub fn mse_increase_ratio(mse_original: f64, mse_pruned: f64) -> Result<f64> {
    if mse_original == 0.0 {
        return Err(Error::Undefined(
            "MSE increase ratio is undefined when the original MSE is 0".into(),
        ));
    }
    Ok((mse_pruned - mse_original) / mse_original)
}
