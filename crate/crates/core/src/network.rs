//! Fully connected regression networks.
//!
//! Layer `k` (1-based, `k = 1..=L`) maps the `n_{k-1}` outputs of the previous
//! layer plus a constant neuron fixed at 1 to `n_k` pre-activations, so its
//! weight matrix is `n_k x (n_{k-1} + 1)` with the bias in the last column.
//! Hidden layers apply the activation; the single output neuron is linear.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde_json::value::RawValue;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    /// Lipschitz constant of the activation.
    pub fn lipschitz(self) -> f64 {
        match self {
            ActivationKind::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::param(format!("unknown activation `{other}`"))),
        }
    }
}

/// Incoming weights of one layer plus the pruning mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `n_k x (n_{k-1} + 1)`; last column multiplies the constant neuron.
    pub weights: DMatrix<f64>,
    /// `true` marks a pruned slot, which must hold exactly 0.
    pub mask: DMatrix<bool>,
}

impl LayerWeights {
    pub fn dense(weights: DMatrix<f64>) -> Self {
        let mask = DMatrix::from_element(weights.nrows(), weights.ncols(), false);
        Self { weights, mask }
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Width of the previous layer, not counting the constant neuron.
    pub fn n_in(&self) -> usize {
        self.weights.ncols() - 1
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.weights.row(j).iter().copied().collect()
    }

    pub fn nonzero(&self) -> usize {
        self.weights
            .iter()
            .zip(self.mask.iter())
            .filter(|(w, m)| !**m && **w != 0.0)
            .count()
    }

    /// Zeroes every masked slot.
    pub fn apply_mask(&mut self) {
        for (w, m) in self.weights.iter_mut().zip(self.mask.iter()) {
            if *m {
                *w = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub activation: ActivationKind,
    pub layers: Vec<LayerWeights>,
}

/// Per-layer record of a batch forward pass.
///
/// `outputs[k]` is `N x n_k` for `k = 0..=L`; `outputs[0]` holds the raw
/// inputs and `outputs[L]` the predictions. `pre_activations[k - 1]` is the
/// `N x n_k` linear part of layer `k`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub outputs: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
}

impl ActivationTrace {
    pub fn output(&self, k: usize) -> &DMatrix<f64> {
        &self.outputs[k]
    }

    /// Linear part of layer `k`, `k >= 1`.
    pub fn pre_activation(&self, k: usize) -> &DMatrix<f64> {
        &self.pre_activations[k - 1]
    }

    pub fn predictions(&self) -> DVector<f64> {
        self.outputs.last().expect("trace has layers").column(0).into_owned()
    }

    /// Layer `k` outputs with the constant neuron appended as a last column:
    /// the regression design for re-fitting layer `k + 1`.
    pub fn design(&self, k: usize) -> DMatrix<f64> {
        with_ones_column(&self.outputs[k])
    }
}

pub(crate) fn with_ones_column(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, c) = m.shape();
    let mut out = DMatrix::from_element(n, c + 1, 1.0);
    out.columns_mut(0, c).copy_from(m);
    out
}

impl Network {
    /// Validates shapes, masks and finiteness.
    pub fn new(activation: ActivationKind, layers: Vec<LayerWeights>) -> Result<Self> {
        let net = Self { activation, layers };
        net.validate()?;
        Ok(net)
    }

    /// Zero-initialized dense network with widths `dims = [p, n_1, ..., 1]`.
    pub fn zeros(dims: &[usize], activation: ActivationKind) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::param("a network needs at least an input and an output width"));
        }
        let layers = dims
            .windows(2)
            .map(|w| LayerWeights::dense(DMatrix::zeros(w[1], w[0] + 1)))
            .collect();
        Self::new(activation, layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Schema("network has no layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.weights.shape() != layer.mask.shape() {
                return Err(Error::Schema(format!("layer {} mask shape differs from weights", k + 1)));
            }
            if layer.weights.ncols() < 2 || layer.weights.nrows() == 0 {
                return Err(Error::Schema(format!("layer {} is empty", k + 1)));
            }
            if k > 0 && layer.n_in() != self.layers[k - 1].n_out() {
                return Err(Error::Schema(format!(
                    "layer {} expects {} inputs but layer {} has {} outputs",
                    k + 1,
                    layer.n_in(),
                    k,
                    self.layers[k - 1].n_out()
                )));
            }
            if layer.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Schema(format!("layer {} has non-finite weights", k + 1)));
            }
            if layer.weights.iter().zip(layer.mask.iter()).any(|(w, m)| *m && *w != 0.0) {
                return Err(Error::Schema(format!("layer {} has a nonzero masked weight", k + 1)));
            }
        }
        if self.output_width() != 1 {
            return Err(Error::Schema(format!(
                "output layer must have width 1, got {}",
                self.output_width()
            )));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, LayerWeights::n_out)
    }

    /// `[n_0, n_1, ..., n_L]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(LayerWeights::n_out))
            .collect()
    }

    /// Evaluates one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_width(),
                got: x.len(),
            });
        }
        let last = self.depth() - 1;
        let mut current: Vec<f64> = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let n_in = layer.n_in();
            let next: Vec<f64> = (0..layer.n_out())
                .map(|j| {
                    let row = layer.weights.row(j);
                    let mut g = 0.0;
                    for (i, v) in current.iter().enumerate() {
                        g += row[i] * v;
                    }
                    g += row[n_in];
                    if k == last {
                        g
                    } else {
                        self.activation.apply(g)
                    }
                })
                .collect();
            current = next;
        }
        Ok(current[0])
    }

    /// Batch forward pass over all rows, keeping every layer.
    pub fn forward_trace(&self, data: &Dataset) -> Result<ActivationTrace> {
        self.trace_matrix(&data.features)
    }

    pub fn trace_matrix(&self, x: &DMatrix<f64>) -> Result<ActivationTrace> {
        if x.ncols() != self.input_width() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let last = self.depth() - 1;
        let mut outputs = Vec::with_capacity(self.depth() + 1);
        let mut pre_activations = Vec::with_capacity(self.depth());
        outputs.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let g = layer_pre_activation(outputs.last().unwrap(), &layer.weights);
            let f = if k == last {
                g.clone()
            } else {
                g.map(|v| self.activation.apply(v))
            };
            pre_activations.push(g);
            outputs.push(f);
        }
        Ok(ActivationTrace {
            outputs,
            pre_activations,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.input_width() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let last = self.depth() - 1;
        let mut current = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut g = layer_pre_activation(&current, &layer.weights);
            if k != last {
                g.apply(|v| *v = self.activation.apply(*v));
            }
            current = g;
        }
        Ok(current.column(0).into_owned())
    }

    /// `(total, nonzero)` over every weight slot, bias slots included.
    pub fn count_params(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(t, nz), l| {
            (t + l.weights.len(), nz + l.nonzero())
        })
    }

    /// Drops masked and zero slots, keeping `(column, weight)` lists per
    /// neuron. Evaluates to the same function as the masked network.
    pub fn to_sparse(&self) -> SparseNetwork {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (0..l.n_out())
                    .map(|j| {
                        (0..l.weights.ncols())
                            .filter(|&i| !l.mask[(j, i)] && l.weights[(j, i)] != 0.0)
                            .map(|i| (i, l.weights[(j, i)]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        SparseNetwork {
            activation: self.activation,
            input_width: self.input_width(),
            layers,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, &WeightFileOut::from(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw: WeightFileIn = read_json(path)?;
        raw.into_network()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WeightFileOut::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: WeightFileIn = serde_json::from_str(s)?;
        raw.into_network()
    }
}

/// `[inputs | 1] * W^T`.
fn layer_pre_activation(inputs: &DMatrix<f64>, weights: &DMatrix<f64>) -> DMatrix<f64> {
    let n_in = weights.ncols() - 1;
    let mut g = inputs * weights.columns(0, n_in).transpose();
    let bias = weights.column(n_in);
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col.add_scalar_mut(bias[j]);
    }
    g
}

/// Network stored as per-neuron lists of surviving connections.
#[derive(Debug, Clone)]
pub struct SparseNetwork {
    pub activation: ActivationKind,
    pub input_width: usize,
    /// `layers[k][j]` lists `(input index, weight)`; index `n_in` is the
    /// constant neuron.
    pub layers: Vec<Vec<Vec<(usize, f64)>>>,
}

impl SparseNetwork {
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_width,
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let n_in = current.len();
            current = layer
                .iter()
                .map(|conns| {
                    let g: f64 = conns
                        .iter()
                        .map(|&(i, w)| if i == n_in { w } else { w * current[i] })
                        .sum();
                    if k == last {
                        g
                    } else {
                        self.activation.apply(g)
                    }
                })
                .collect();
        }
        Ok(current[0])
    }

    pub fn n_connections(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }
}

#[derive(Serialize)]
struct WeightFileOut {
    activation: ActivationKind,
    layer_dims: Vec<usize>,
    layers: Vec<LayerOut>,
}

#[derive(Serialize)]
struct LayerOut {
    rows: usize,
    cols: usize,
    /// Row-major, 17 significant digits each.
    values: Vec<Box<RawValue>>,
    mask: Vec<bool>,
}

fn exact_decimal(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("finite float formats as a JSON number")
}

impl From<&Network> for WeightFileOut {
    fn from(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let (rows, cols) = l.weights.shape();
                let mut values = Vec::with_capacity(rows * cols);
                let mut mask = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        values.push(exact_decimal(l.weights[(r, c)]));
                        mask.push(l.mask[(r, c)]);
                    }
                }
                LayerOut {
                    rows,
                    cols,
                    values,
                    mask,
                }
            })
            .collect();
        Self {
            activation: net.activation,
            layer_dims: net.layer_dims(),
            layers,
        }
    }
}

#[derive(Deserialize)]
struct WeightFileIn {
    activation: ActivationKind,
    layer_dims: Vec<usize>,
    layers: Vec<LayerIn>,
}

#[derive(Deserialize)]
struct LayerIn {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl WeightFileIn {
    fn into_network(self) -> Result<Network> {
        if self.layer_dims.len() != self.layers.len() + 1 {
            return Err(Error::Schema(format!(
                "layer_dims lists {} widths but there are {} layers",
                self.layer_dims.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.into_iter().enumerate() {
            let (rows, cols) = (self.layer_dims[k + 1], self.layer_dims[k] + 1);
            if l.rows != rows || l.cols != cols {
                return Err(Error::Schema(format!(
                    "layer {} is {}x{}, layer_dims imply {}x{}",
                    k + 1,
                    l.rows,
                    l.cols,
                    rows,
                    cols
                )));
            }
            if l.values.len() != rows * cols || l.mask.len() != rows * cols {
                return Err(Error::Schema(format!(
                    "layer {} holds {} values and {} mask entries, expected {}",
                    k + 1,
                    l.values.len(),
                    l.mask.len(),
                    rows * cols
                )));
            }
            layers.push(LayerWeights {
                weights: DMatrix::from_row_slice(rows, cols, &l.values),
                mask: DMatrix::from_row_slice(rows, cols, &l.mask),
            });
        }
        Network::new(self.activation, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn layer(rows: usize, cols: usize, v: &[f64]) -> LayerWeights {
        LayerWeights::dense(DMatrix::from_row_slice(rows, cols, v))
    }

    /// 2-2-1 ReLU net used by several tests.
    fn small_relu() -> Network {
        Network::new(
            ActivationKind::Relu,
            vec![
                layer(2, 3, &[1.0, -1.0, 0.5, 2.0, 1.0, -3.0]),
                layer(1, 3, &[1.5, -2.0, 0.25]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(ActivationKind::Relu.lipschitz(), 1.0);
        assert_eq!(ActivationKind::Tanh.lipschitz(), 1.0);
        assert_eq!(ActivationKind::Sigmoid.lipschitz(), 0.25);
        assert_eq!(ActivationKind::Identity.lipschitz(), 1.0);
    }

    #[test]
    fn identity_composition() {
        let net = Network::new(
            ActivationKind::Identity,
            vec![layer(1, 2, &[1.0, 0.0]), layer(1, 2, &[1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn relu_clamp() {
        let net = Network::new(
            ActivationKind::Relu,
            vec![layer(1, 2, &[1.0, -3.0]), layer(1, 2, &[1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_relu_net() {
        // x = [1, 2]
        // h1 = relu(1 - 2 + 0.5) = 0, h2 = relu(2 + 2 - 3) = 1
        // out = 1.5*0 - 2*1 + 0.25 = -1.75
        let net = small_relu();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), -1.75);
        // x = [3, -1]: h1 = relu(3 + 1 + 0.5) = 4.5, h2 = relu(6 - 1 - 3) = 2
        // out = 6.75 - 4 + 0.25 = 3.0
        assert_eq!(net.forward(&[3.0, -1.0]).unwrap(), 3.0);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(matches!(
            small_relu().forward(&[1.0]),
            Err(Error::Dimension { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn trace_matches_forward() {
        let net = small_relu();
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, -1.0, -0.5, 0.7]);
        let trace = net.trace_matrix(&x).unwrap();
        let preds = trace.predictions();
        for i in 0..3 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            assert_relative_eq!(preds[i], net.forward(&row).unwrap(), epsilon = 1e-14);
        }
        let h = trace.output(1);
        let g = trace.pre_activation(1);
        for (a, b) in h.iter().zip(g.iter()) {
            assert_eq!(*a, b.max(0.0));
        }
        assert_eq!(trace.design(1).ncols(), 3);
        assert_eq!(net.predict(&x).unwrap(), preds);
    }

    #[test]
    fn identity_trace_outputs_equal_pre_activations() {
        let mut net = small_relu();
        net.activation = ActivationKind::Identity;
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 4.0]);
        let t = net.trace_matrix(&x).unwrap();
        for k in 1..=net.depth() {
            assert_eq!(t.output(k), t.pre_activation(k));
        }
    }

    #[test]
    fn count_params_examples() {
        let net = small_relu();
        assert_eq!(net.count_params(), (9, 9));
        let zero = Network::zeros(&[2, 2, 1], ActivationKind::Relu).unwrap();
        assert_eq!(zero.count_params(), (9, 0));

        let mut half = Network::zeros(&[3, 1], ActivationKind::Relu).unwrap();
        half.layers[0].weights.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        half.layers[0].mask[(0, 1)] = true;
        half.layers[0].mask[(0, 3)] = true;
        half.layers[0].apply_mask();
        assert_eq!(half.count_params(), (4, 2));
    }

    #[test]
    fn validation_catches_bad_shapes() {
        assert!(Network::new(
            ActivationKind::Relu,
            vec![layer(2, 3, &[0.0; 6]), layer(1, 4, &[0.0; 4])]
        )
        .is_err());
        assert!(Network::new(ActivationKind::Relu, vec![layer(2, 3, &[0.0; 6])]).is_err());
        let mut bad = small_relu();
        bad.layers[0].mask[(0, 0)] = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        let mut net = small_relu();
        net.layers[0].weights[(1, 1)] = 0.1 + 0.2;
        net.layers[1].weights[(0, 0)] = std::f64::consts::PI * 1e-300;
        net.layers[1].mask[(0, 1)] = true;
        net.layers[1].apply_mask();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back, net);
        assert!(back.layers[1].mask[(0, 1)]);
        for (a, b) in back.layers.iter().zip(&net.layers) {
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("3.0000000000000004e-1"));
    }

    #[test]
    fn weight_file_rejects_bad_layer_count() {
        let net = small_relu();
        let text = net.to_json().unwrap();
        let tampered = text.replacen("\"layer_dims\": [\n    2,", "\"layer_dims\": [\n    2,\n    7,", 1);
        assert_ne!(text, tampered);
        assert!(matches!(Network::from_json(&tampered), Err(Error::Schema(_))));
        assert!(Network::from_json("{not json").is_err());
    }

    #[test]
    fn sparse_network_agrees_with_masked_network() {
        let mut net = small_relu();
        net.layers[0].mask[(0, 1)] = true;
        net.layers[1].mask[(0, 2)] = true;
        net.layers[0].apply_mask();
        net.layers[1].apply_mask();
        let sparse = net.to_sparse();
        assert_eq!(sparse.n_connections(), net.count_params().1);
        for x in [[1.0, 2.0], [-0.3, 0.9], [4.0, 4.0]] {
            assert_eq!(sparse.forward(&x).unwrap(), net.forward(&x).unwrap());
        }
    }
}
