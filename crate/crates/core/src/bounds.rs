//! Numerical evaluation of the pruning error bounds.
//!
//! Indexing follows the layer outputs: statistics at index `k` (`0..L`)
//! describe the weights that read `f^(k)`, i.e. the `k + 1`-th weight matrix
//! of a [`Network`], together with the width `n_k` and the empirical norm of
//! `f^(k)`. The constant neuron is part of every `f^(k)`, so `n_k` counts it
//! and the `t_k` norms include the bias weights.
//!
//! `‖f_j^(k)‖_2` is estimated as `sqrt(mean_rows f_j^(k)^2)` over the supplied
//! data. The universal constant `C` is unknown, so totals are only meaningful
//! for comparing configurations.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::sparsity::lq_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// `t_k`: largest `‖w_i‖_{q_k}` over the neurons fed by `f^(k)`.
    pub t: Vec<f64>,
    pub q: Vec<f64>,
    /// `n_k`: number of inputs available, constant neuron included.
    pub n: Vec<usize>,
    /// Largest empirical L2 norm among the `f_j^(k)`.
    pub max_f_norm: Vec<f64>,
}

impl LayerStats {
    pub fn depth(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.t.len();
        if l == 0 {
            return Err(Error::param("layer statistics are empty"));
        }
        for (name, len) in [("q", self.q.len()), ("n", self.n.len()), ("max_f_norm", self.max_f_norm.len())] {
            if len != l {
                return Err(Error::param(format!("{name} has {len} entries, expected {l}")));
            }
        }
        for k in 0..l {
            check_q(self.q[k])?;
            if !(self.t[k] >= 0.0) || !(self.max_f_norm[k] >= 0.0) {
                return Err(Error::param(format!("layer {k}: t and max_f_norm must be >= 0")));
            }
        }
        Ok(())
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::param(format!("q must lie in (0, 1], got {q}")));
    }
    Ok(())
}

fn stats_with(net: &Network, data: &Dataset, q: &[f64], surviving_only: bool) -> Result<LayerStats> {
    net.validate()?;
    let l = net.depth();
    if q.len() != l {
        return Err(Error::Dimension {
            context: "per-layer q values",
            expected: l,
            got: q.len(),
        });
    }
    let trace = net.forward_trace(data)?;
    let rows = data.n_rows().max(1) as f64;
    let mut stats = LayerStats {
        t: Vec::with_capacity(l),
        q: q.to_vec(),
        n: Vec::with_capacity(l),
        max_f_norm: Vec::with_capacity(l),
    };
    for k in 0..l {
        check_q(q[k])?;
        let layer = &net.layers[k];
        let mut t = 0.0f64;
        for i in 0..layer.n_out() {
            if surviving_only && !survives(net, k + 1, i) {
                continue;
            }
            t = t.max(lq_norm(&layer.row(i), q[k])?);
        }
        let f = trace.output(k);
        // the constant neuron has norm 1
        let mut best = 1.0f64;
        for j in 0..f.ncols() {
            let ms = f.column(j).iter().map(|v| v * v).sum::<f64>() / rows;
            best = best.max(ms.sqrt());
        }
        stats.t.push(t);
        stats.n.push(layer.n_in() + 1);
        stats.max_f_norm.push(best);
    }
    Ok(stats)
}

/// True when neuron `i` of layer `k` (1-based) still feeds the output: the
/// output layer always does, hidden neurons need a nonzero outgoing weight.
fn survives(net: &Network, k: usize, i: usize) -> bool {
    if k == net.depth() {
        return true;
    }
    let next = &net.layers[k].weights;
    next.column(i).iter().any(|w| *w != 0.0)
}

/// Layer statistics with `t_k` taken over all neurons.
pub fn layer_stats(net: &Network, data: &Dataset, q: &[f64]) -> Result<LayerStats> {
    stats_with(net, data, q, false)
}

/// As [`layer_stats`], but `t_k` only ranges over neurons that still reach
/// the output of (typically pruned) `net`.
pub fn layer_stats_surviving(net: &Network, data: &Dataset, q: &[f64]) -> Result<LayerStats> {
    stats_with(net, data, q, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInput {
    pub stats: LayerStats,
    /// Kept count `m_k` per index `k`.
    pub m: Vec<usize>,
    pub steps: usize,
    pub rho: f64,
    pub c: f64,
    pub base_error: f64,
}

impl BoundInput {
    pub fn new(stats: LayerStats, m: Vec<usize>, steps: usize, rho: f64) -> Self {
        Self {
            stats,
            m,
            steps,
            rho,
            c: 1.0,
            base_error: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stats.validate()?;
        let l = self.stats.depth();
        if self.m.len() != l {
            return Err(Error::Dimension {
                context: "per-layer kept counts",
                expected: l,
                got: self.m.len(),
            });
        }
        for (k, (&m, &n)) in self.m.iter().zip(&self.stats.n).enumerate() {
            if m < 1 {
                return Err(Error::param(format!("m_{k} must be >= 1")));
            }
            if m > n {
                return Err(Error::param(format!("m_{k} = {m} exceeds n_{k} = {n}")));
            }
        }
        if self.steps < 1 || self.steps > l {
            return Err(Error::param(format!("S must lie in 1..={l}, got {}", self.steps)));
        }
        for (name, v) in [("rho", self.rho), ("C", self.c), ("base error", self.base_error)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundVariant {
    Theorem1,
    Magnitude,
    Classification,
    Corollary,
}

impl std::str::FromStr for BoundVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "theorem1" => Ok(BoundVariant::Theorem1),
            "magnitude" => Ok(BoundVariant::Magnitude),
            "classification" => Ok(BoundVariant::Classification),
            "corollary" => Ok(BoundVariant::Corollary),
            other => Err(Error::param(format!("unknown bound variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub per_step_terms: Vec<f64>,
    pub total: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
    #[serde(rename = "S")]
    pub steps: usize,
    /// Additive term in front of the step sum (doubled for classification).
    pub base: f64,
}

/// Step terms `rho^(s-1) * C * prod_{u<=s} t_{L-u} * m_{L-s}^e(q_{L-s}) * F_{L-s}`.
fn step_terms(input: &BoundInput, exponent: impl Fn(f64) -> f64, c: f64) -> Vec<f64> {
    let st = &input.stats;
    let l = st.depth();
    let mut prod = 1.0;
    let mut rho_pow = 1.0;
    let mut terms = Vec::with_capacity(input.steps);
    for s in 1..=input.steps {
        let k = l - s;
        prod *= st.t[k];
        let m = input.m[k] as f64;
        terms.push(rho_pow * c * prod * m.powf(exponent(st.q[k])) * st.max_f_norm[k]);
        rho_pow *= input.rho;
    }
    terms
}

fn report(variant: BoundVariant, input: &BoundInput, terms: Vec<f64>, c: f64, base: f64) -> BoundReport {
    let total = base + terms.iter().sum::<f64>();
    BoundReport {
        variant,
        per_step_terms: terms,
        total,
        c,
        rho: input.rho,
        steps: input.steps,
        base,
    }
}

pub fn theorem1_report(input: &BoundInput) -> Result<BoundReport> {
    input.validate()?;
    let terms = step_terms(input, |q| 0.5 - 1.0 / q, input.c);
    Ok(report(BoundVariant::Theorem1, input, terms, input.c, input.base_error))
}

pub fn theorem1_bound(input: &BoundInput) -> Result<f64> {
    theorem1_report(input).map(|r| r.total)
}

/// Same shape as the Theorem-1 bound with exponent `1 - 1/q` and `C = 1`.
pub fn magnitude_report(input: &BoundInput) -> Result<BoundReport> {
    input.validate()?;
    let terms = step_terms(input, |q| 1.0 - 1.0 / q, 1.0);
    Ok(report(BoundVariant::Magnitude, input, terms, 1.0, input.base_error))
}

pub fn magnitude_bound(input: &BoundInput) -> Result<f64> {
    magnitude_report(input).map(|r| r.total)
}

/// `2 * base_l2` plus the Theorem-1 step terms; `input.base_error` is ignored.
pub fn classification_report(input: &BoundInput, base_l2: f64) -> Result<BoundReport> {
    input.validate()?;
    if !(base_l2 >= 0.0) || !base_l2.is_finite() {
        return Err(Error::param(format!("base_l2 must be finite and >= 0, got {base_l2}")));
    }
    let terms = step_terms(input, |q| 0.5 - 1.0 / q, input.c);
    Ok(report(BoundVariant::Classification, input, terms, input.c, 2.0 * base_l2))
}

pub fn classification_bound(input: &BoundInput, base_l2: f64) -> Result<f64> {
    classification_report(input, base_l2).map(|r| r.total)
}

/// Homogeneous pruning: `C * (sum_s prod_{u<=s} t_{L-u}) * m^(1/2 - 1/q)`
/// plus `base_error`. `t` is indexed like [`LayerStats::t`].
pub fn corollary_terms(t: &[f64], m: usize, q: f64, steps: usize, c: f64) -> Result<Vec<f64>> {
    check_q(q)?;
    if m < 1 {
        return Err(Error::param("m must be >= 1"));
    }
    if steps < 1 || steps > t.len() {
        return Err(Error::param(format!("S must lie in 1..={}, got {steps}", t.len())));
    }
    let factor = c * (m as f64).powf(0.5 - 1.0 / q);
    let l = t.len();
    let mut prod = 1.0;
    Ok((1..=steps)
        .map(|s| {
            prod *= t[l - s];
            factor * prod
        })
        .collect())
}

pub fn corollary_bound(t: &[f64], m: usize, q: f64, steps: usize, c: f64, base_error: f64) -> Result<f64> {
    Ok(base_error + corollary_terms(t, m, q, steps, c)?.iter().sum::<f64>())
}

/// Dispatches on `variant`. The corollary needs a single `m` and `q`, so all
/// layers must agree on both.
pub fn evaluate(input: &BoundInput, variant: BoundVariant) -> Result<BoundReport> {
    match variant {
        BoundVariant::Theorem1 => theorem1_report(input),
        BoundVariant::Magnitude => magnitude_report(input),
        BoundVariant::Classification => classification_report(input, input.base_error),
        BoundVariant::Corollary => {
            input.validate()?;
            let m = input.m[0];
            let q = input.stats.q[0];
            if input.m.iter().any(|&v| v != m) || input.stats.q.iter().any(|&v| v != q) {
                return Err(Error::param("the corollary bound needs the same m and q in every layer"));
            }
            let terms = corollary_terms(&input.stats.t, m, q, input.steps, input.c)?;
            Ok(report(BoundVariant::Corollary, input, terms, input.c, input.base_error))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationKind, LayerWeights};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn unit(l: usize, q: f64, n: usize) -> LayerStats {
        LayerStats {
            t: vec![1.0; l],
            q: vec![q; l],
            n: vec![n; l],
            max_f_norm: vec![1.0; l],
        }
    }

    #[test]
    fn unit_fixture_is_one_eighth() {
        let input = BoundInput::new(unit(1, 0.5, 8), vec![4], 1, 1.0);
        assert_eq!(theorem1_bound(&input).unwrap(), 0.125);
        assert_eq!(magnitude_bound(&input).unwrap(), 0.25);
        assert_relative_eq!(classification_bound(&input, 0.1).unwrap(), 0.325, epsilon = 1e-15);
    }

    #[test]
    fn doubling_m_scales_first_term() {
        let a = theorem1_bound(&BoundInput::new(unit(2, 0.5, 16), vec![4, 4], 1, 1.0)).unwrap();
        let b = theorem1_bound(&BoundInput::new(unit(2, 0.5, 16), vec![4, 8], 1, 1.0)).unwrap();
        assert_relative_eq!(b / a, 2f64.powf(-1.5), epsilon = 1e-15);
    }

    #[test]
    fn no_pruning_is_still_positive() {
        let input = BoundInput::new(unit(3, 0.7, 5), vec![5, 5, 5], 3, 1.0);
        assert!(theorem1_bound(&input).unwrap() > 0.0);
    }

    #[test]
    fn corollary_examples() {
        assert_eq!(corollary_bound(&[1.0; 3], 1, 0.5, 3, 1.0, 0.0).unwrap(), 3.0);
        assert_eq!(corollary_bound(&[0.0; 3], 2, 0.5, 3, 1.0, 0.0).unwrap(), 0.0);
        let input = BoundInput::new(unit(2, 0.3, 9), vec![6, 6], 1, 1.0);
        assert_relative_eq!(
            corollary_bound(&input.stats.t, 6, 0.3, 1, 1.0, 0.0).unwrap(),
            theorem1_bound(&input).unwrap(),
            epsilon = 1e-15
        );
        let r = evaluate(&input, BoundVariant::Corollary).unwrap();
        assert_eq!(r.per_step_terms.len(), 1);
    }

    #[test]
    fn rho_weights_later_steps() {
        let mut input = BoundInput::new(unit(2, 1.0, 3), vec![1, 1], 2, 0.25);
        input.c = 2.0;
        let r = theorem1_report(&input).unwrap();
        assert_eq!(r.per_step_terms, vec![2.0, 0.5]);
        assert_eq!(r.total, 2.5);
    }

    #[test]
    fn input_validation() {
        assert!(theorem1_bound(&BoundInput::new(unit(1, 0.5, 4), vec![0], 1, 1.0)).is_err());
        assert!(theorem1_bound(&BoundInput::new(unit(1, 0.5, 4), vec![5], 1, 1.0)).is_err());
        assert!(theorem1_bound(&BoundInput::new(unit(1, 0.5, 4), vec![2], 2, 1.0)).is_err());
        assert!(theorem1_bound(&BoundInput::new(unit(1, 1.5, 4), vec![2], 1, 1.0)).is_err());
        assert!(classification_bound(&BoundInput::new(unit(1, 0.5, 4), vec![2], 1, 1.0), -1.0).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = theorem1_report(&BoundInput::new(unit(1, 0.5, 4), vec![4], 1, 1.0)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["per_step_terms", "total", "C", "rho", "S"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn stats_from_network() {
        // one-hot rows (bias slot included) give t = 1 at any q
        let w1 = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let w2 = DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0]);
        let net = Network::new(
            ActivationKind::Sigmoid,
            vec![LayerWeights::dense(w1), LayerWeights::dense(w2)],
        )
        .unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[3.0, 4.0, -1.0, 0.5, 2.0, -2.0]);
        let data = Dataset::from_parts(x, DVector::zeros(3)).unwrap();
        let st = layer_stats(&net, &data, &[0.5, 1.0]).unwrap();
        assert_eq!(st.t, vec![1.0, 2.0]);
        assert_eq!(st.n, vec![3, 3]);
        assert!(st.max_f_norm[1] <= 1.0);
        let expect = ((16.0 + 0.25 + 4.0) / 3.0f64).sqrt();
        assert_relative_eq!(st.max_f_norm[0], expect, epsilon = 1e-14);

        // neuron 1 of the hidden layer no longer reaches the output
        let surv = layer_stats_surviving(&net, &data, &[0.5, 1.0]).unwrap();
        assert_eq!(surv.t, vec![1.0, 2.0]);
        let mut pruned = net.clone();
        pruned.layers[0].weights[(0, 1)] = 5.0;
        pruned.layers[0].weights[(1, 0)] = -7.0;
        let all = layer_stats(&pruned, &data, &[1.0, 1.0]).unwrap();
        let surv = layer_stats_surviving(&pruned, &data, &[1.0, 1.0]).unwrap();
        assert_eq!(all.t[0], 7.0);
        assert_eq!(surv.t[0], 5.0);
    }
}
