//! Norms, the sparsity index and the keep-count rule derived from it.
//!
//! For `0 < q < 1` the lq quasinorm `(sum |w_i|^q)^(1/q)` dominates the l1
//! norm, so `SI_q(w) = ||w||_1 / ||w||_q` lives in `[d^(1-1/q), 1]`: it is 1
//! for a one-hot vector and hits the lower end for a constant-magnitude one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack applied before rounding the keep-count bound up, so that a
/// bound which is an integer up to rounding noise is not bumped by one.
const CEIL_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub len: usize,
    pub q: f64,
    pub lq: f64,
    pub l1: f64,
    pub l0: usize,
    /// `None` for the zero vector.
    pub si: Option<f64>,
}

impl SparsityProfile {
    pub fn of(w: &[f64], q: f64) -> Result<Self> {
        check_open_q(q)?;
        Ok(Self {
            len: w.len(),
            q,
            lq: lq_norm(w, q)?,
            l1: l1_norm(w),
            l0: l0_norm(w),
            si: sparsity_index(w, q)?,
        })
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("q must lie in (0, 1], got {q}")))
    }
}

fn check_open_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("q must lie in (0, 1), got {q}")))
    }
}

/// `(sum |w_i|^q)^(1/q)` for `q` in `(0, 1]`.
///
/// The largest magnitude is factored out first so that small `q` (large
/// `1/q`) cannot overflow: `||w||_q = max|w| * (sum (|w_i|/max)^q)^(1/q)`.
pub fn lq_norm(w: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    let max = w.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(l1_norm(w));
    }
    let sum: f64 = w.iter().map(|v| (v.abs() / max).powf(q)).sum();
    Ok(max * sum.powf(1.0 / q))
}

pub fn l1_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

pub fn l0_norm(w: &[f64]) -> usize {
    w.iter().filter(|v| **v != 0.0).count()
}

/// `||w||_1 / ||w||_q`; `None` when `w` is the zero vector.
pub fn sparsity_index(w: &[f64], q: f64) -> Result<Option<f64>> {
    check_open_q(q)?;
    let lq = lq_norm(w, q)?;
    if lq == 0.0 {
        return Ok(None);
    }
    Ok(Some(l1_norm(w) / lq))
}

/// Real-valued lower bound on the number of weights to keep:
/// `SI^(-q/(1-q)) * (1+eta)^(-1/(1-q))`.
///
/// Any `m` for which the top-`m` entries satisfy the tail condition
/// `sum_{i not in I_m} |w_i|^q <= eta * sum_{i in I_m} |w_i|^q` is at least
/// this large.
pub fn keep_count_bound(w: &[f64], q: f64, eta: f64) -> Result<f64> {
    check_open_q(q)?;
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::param(format!("eta must be finite and >= 0, got {eta}")));
    }
    let si = sparsity_index(w, q)?
        .ok_or_else(|| Error::param("keep count is undefined for the zero vector"))?;
    let inv = 1.0 / (1.0 - q);
    Ok(si.powf(-q * inv) * (1.0 + eta).powf(-inv))
}

/// Number of weights kept by the magnitude rule: the bound from
/// [`keep_count_bound`] rounded up and clamped to `[1, d]`.
pub fn keep_count(w: &[f64], q: f64, eta: f64) -> Result<usize> {
    let raw = keep_count_bound(w, q, eta)?;
    let m = (raw * (1.0 - CEIL_SLACK)).ceil();
    Ok((m as usize).clamp(1, w.len()))
}

/// `M / m`. A `kept` of zero has no finite ratio and is an error here.
pub fn compression_ratio(total: usize, kept: usize) -> Result<f64> {
    check_counts(total, kept)?;
    if kept == 0 {
        return Err(Error::Undefined(
            "compression ratio is infinite when no weight is kept".into(),
        ));
    }
    Ok(total as f64 / kept as f64)
}

/// `1 - m / M`.
pub fn pruning_ratio(total: usize, kept: usize) -> Result<f64> {
    check_counts(total, kept)?;
    Ok(1.0 - kept as f64 / total as f64)
}

fn check_counts(total: usize, kept: usize) -> Result<()> {
    if total == 0 {
        return Err(Error::param("total parameter count must be >= 1"));
    }
    if kept > total {
        return Err(Error::param(format!("kept ({kept}) exceeds total ({total})")));
    }
    Ok(())
}

/// Indices of the `m` largest magnitudes, ties going to the lower index.
/// Returned in ascending index order.
pub fn top_m_indices(w: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
    order.truncate(m.min(w.len()));
    order.sort_unstable();
    order
}

/// Realized tolerance of keeping the top `m` entries:
/// `sum_{i not in I_m} |w_i|^q / sum_{i in I_m} |w_i|^q`.
pub fn achieved_tail_ratio(w: &[f64], m: usize, q: f64) -> f64 {
    let kept = top_m_indices(w, m);
    let mut in_set = vec![false; w.len()];
    for &i in &kept {
        in_set[i] = true;
    }
    let (mut head, mut tail) = (0.0, 0.0);
    for (i, v) in w.iter().enumerate() {
        let p = v.abs().powf(q);
        if in_set[i] {
            head += p;
        } else {
            tail += p;
        }
    }
    if tail == 0.0 {
        0.0
    } else {
        tail / head
    }
}

/// Entries exceeding `||w||_q * m^(-1/q)`.
///
/// This set has at most `m` members, sits inside the top-`m` support, and the
/// l1 mass outside it is at most `||w||_q * m^(1-1/q)`.
pub fn threshold_support(w: &[f64], q: f64, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::param("m must be >= 1"));
    }
    let t = lq_norm(w, q)?;
    let cut = t * (m as f64).powf(-1.0 / q);
    Ok(w
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > cut)
        .map(|(i, _)| i)
        .collect())
}
