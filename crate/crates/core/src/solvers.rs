//! Least-squares re-fitting: minimum-norm OLS and LASSO by cyclic coordinate
//! descent.
//!
//! The LASSO objective is `(1/2N) ||y - Xw||^2 + lambda * sum_j |w_j|`, where a
//! constant (intercept) column is left out of the penalty unless
//! `penalize_constant` is set. Coordinate descent runs in covariance mode on
//! the `m x m` Gram matrix, so one [`Design`] can be shared by every neuron
//! that regresses on the same layer outputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stationarity residual accepted as converged, relative to the scale of the
/// correlations `|X_j^T y| / N`.
const KKT_REL_TOL: f64 = 1e-9;

/// Sweeps after which an unconverged coordinate descent restarts from the
/// homotopy solution.
const HOMOTOPY_AFTER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub lambda: f64,
    /// Stop when the largest scaled coefficient change in a sweep falls
    /// below `tol` times the largest scaled coefficient.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub penalize_constant: bool,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    10_000
}

impl LassoConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            tol: default_tol(),
            max_iter: default_max_iter(),
            penalize_constant: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::param(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: Vec<f64>,
    /// Indices with a nonzero weight, ascending.
    pub support: Vec<usize>,
    /// Full coordinate sweeps (1 for the direct OLS solve).
    pub iterations: usize,
    pub converged: bool,
    /// `(1/2N) ||y - Xw||^2` plus the l1 penalty (zero for OLS).
    pub objective: f64,
}

fn support_of(w: &[f64]) -> Vec<usize> {
    w.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn check_problem(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::param("design matrix must be non-empty"));
    }
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            context: "regression targets",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::param("regression inputs must be finite"));
    }
    Ok(())
}

/// Minimum-l2-norm least-squares solution `X^+ y`.
///
/// Householder QR reduces `X` to its triangular factor; the pseudo-inverse
/// of that small factor is taken through its SVD, discarding singular values
/// below `max(N, m) * eps * sigma_max`.
pub fn ols_min_norm(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<FitResult> {
    check_problem(x, y)?;
    let (n, m) = x.shape();
    let (r, qty) = if n > m {
        let qr = x.clone().qr();
        let qty = qr.q().tr_mul(y);
        (qr.r(), qty)
    } else {
        (x.clone(), y.clone())
    };
    let svd = r.svd(true, true);
    let smax = svd.singular_values.max();
    let cut = (n.max(m) as f64) * f64::EPSILON * smax;
    let w = svd
        .solve(&qty, cut)
        .map_err(|e| Error::Undefined(format!("pseudo-inverse solve failed: {e}")))?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let objective = half_mse(x, y, &weights);
    Ok(FitResult {
        support: support_of(&weights),
        weights,
        iterations: 1,
        converged: true,
        objective,
    })
}

fn residual(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    y - x * DVector::from_column_slice(w)
}

fn half_mse(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> f64 {
    residual(x, y, w).norm_squared() / (2.0 * x.nrows() as f64)
}

/// Sufficient statistics of a design matrix for covariance-mode solvers.
#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    means: Vec<f64>,
    /// `(X - 1 mu^T)^T (X - 1 mu^T) / N`.
    centered_gram: DMatrix<f64>,
    /// `X^T X / N`.
    gram: DMatrix<f64>,
    constant: Vec<bool>,
}

/// Per-target statistics paired with a [`Design`].
#[derive(Debug, Clone)]
pub struct TargetStats {
    pub mean: f64,
    /// `X^T y / N`.
    pub xty: DVector<f64>,
    /// `(X - 1 mu^T)^T y / N`.
    pub centered_xty: DVector<f64>,
}

impl Design {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::param("design matrix must be non-empty"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("design matrix must be finite"));
        }
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            let c = x.column(j);
            let first = c[0];
            let is_const = c.iter().all(|v| *v == first);
            let mean = if is_const { first } else { c.sum() / n };
            col.add_scalar_mut(-mean);
            if is_const {
                col.fill(0.0);
            }
            means.push(mean);
            constant.push(is_const);
        }
        let centered_gram = xc.tr_mul(&xc) / n;
        let gram = x.tr_mul(&x) / n;
        Ok(Self {
            x,
            means,
            centered_gram,
            gram,
            constant,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.constant[j]
    }

    pub fn target_stats(&self, y: &DVector<f64>) -> Result<TargetStats> {
        if y.len() != self.n_rows() {
            return Err(Error::Dimension {
                context: "regression targets",
                expected: self.n_rows(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("regression targets must be finite"));
        }
        let n = self.n_rows() as f64;
        let xty = self.x.tr_mul(y) / n;
        let centered_xty = DVector::from_fn(self.n_cols(), |j, _| {
            if self.constant[j] {
                0.0
            } else {
                let mu = self.means[j];
                self.x.column(j).iter().zip(y.iter()).map(|(a, b)| (a - mu) * b).sum::<f64>() / n
            }
        });
        Ok(TargetStats {
            mean: y.sum() / n,
            xty,
            centered_xty,
        })
    }

    /// First nonzero constant column, which carries the intercept.
    fn intercept_column(&self) -> Option<usize> {
        (0..self.n_cols()).find(|&j| self.constant[j] && self.means[j] != 0.0)
    }

    /// Minimum-norm least squares restricted to `columns`, solved from the
    /// normal equations through a symmetric eigendecomposition of the Gram
    /// block. Returns a full-length weight vector, zero off `columns`.
    pub fn ols_subset(&self, stats: &TargetStats, columns: &[usize]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_cols()];
        if columns.is_empty() {
            return w;
        }
        let k = columns.len();
        let g = DMatrix::from_fn(k, k, |a, b| self.gram[(columns[a], columns[b])]);
        let b = DVector::from_fn(k, |a, _| stats.xty[columns[a]]);
        let coef = sym_min_norm_solve(g, &b);
        for (a, &j) in columns.iter().enumerate() {
            w[j] = coef[a];
        }
        w
    }

    /// Mean squared residual of `w` on target `y`.
    pub fn mse(&self, y: &DVector<f64>, w: &[f64]) -> f64 {
        let mut r = y.clone();
        for (j, wj) in w.iter().enumerate() {
            if *wj != 0.0 {
                r.axpy(-*wj, &self.x.column(j), 1.0);
            }
        }
        r.norm_squared() / self.n_rows() as f64
    }

    /// LASSO by cyclic coordinate descent on the Gram matrix.
    ///
    /// With an unpenalized constant column, the problem is solved on centered
    /// columns and the intercept recovered afterwards; other zero-variance
    /// columns get weight 0. Without one, the raw Gram matrix is used and only
    /// all-zero columns are skipped.
    pub fn lasso(&self, stats: &TargetStats, cfg: &LassoConfig) -> Result<LassoPath> {
        cfg.validate()?;
        let m = self.n_cols();
        let intercept = if cfg.penalize_constant {
            None
        } else {
            self.intercept_column()
        };
        let (a, b): (&DMatrix<f64>, &DVector<f64>) = match intercept {
            Some(_) => (&self.centered_gram, &stats.centered_xty),
            None => (&self.gram, &stats.xty),
        };
        let active: Vec<usize> = (0..m)
            .filter(|&j| a[(j, j)] > 0.0 && !(intercept.is_some() && self.constant[j]))
            .collect();
        let scale: Vec<f64> = (0..m).map(|j| a[(j, j)].max(0.0).sqrt()).collect();
        let kkt_tol = KKT_REL_TOL * b.amax().max(cfg.lambda).max(f64::MIN_POSITIVE);

        let mut w = vec![0.0; m];
        let mut grad = b.clone();
        let mut history = Vec::new();
        let mut converged = false;
        let mut sweeps = 0;

        while sweeps < cfg.max_iter {
            sweeps += 1;
            let mut max_delta = 0.0_f64;
            let mut max_coef = 0.0_f64;
            for &j in &active {
                let ajj = a[(j, j)];
                let old = w[j];
                let rho = grad[j] + ajj * old;
                let new = soft_threshold(rho, cfg.lambda) / ajj;
                let delta = new - old;
                if delta != 0.0 {
                    grad.axpy(-delta, &a.column(j), 1.0);
                    w[j] = new;
                }
                max_delta = max_delta.max(delta.abs() * scale[j]);
                max_coef = max_coef.max(new.abs() * scale[j]);
            }
            history.push(self.objective_from_gram(a, b, &w, cfg.lambda));
            if max_delta <= cfg.tol * max_coef || max_coef == 0.0 {
                // refresh the incrementally updated gradient before certifying
                grad = b - a * DVector::from_column_slice(&w);
                if stationarity(&grad, &w, cfg.lambda, &active) <= kkt_tol {
                    converged = true;
                    break;
                }
            }
            if sweeps == HOMOTOPY_AFTER {
                // slow progress: jump to the exact path solution, then let
                // the sweeps clean up rounding
                let exact = lasso_homotopy(a, b, cfg.lambda, &active);
                if let Some(exact) = exact.filter(|e| {
                    self.objective_from_gram(a, b, e, cfg.lambda) <= self.objective_from_gram(a, b, &w, cfg.lambda)
                }) {
                    w = exact;
                    grad = b - a * DVector::from_column_slice(&w);
                }
            }
        }

        if let Some(c) = intercept {
            let fitted: f64 = active.iter().map(|&j| self.means[j] * w[j]).sum();
            w[c] = (stats.mean - fitted) / self.means[c];
        }
        Ok(LassoPath {
            weights: w,
            sweeps,
            converged,
            objective_history: history,
        })
    }

    /// Objective of the reduced problem, up to the constant `y^T y / 2N`.
    fn objective_from_gram(&self, a: &DMatrix<f64>, b: &DVector<f64>, w: &[f64], lambda: f64) -> f64 {
        let wv = DVector::from_column_slice(w);
        0.5 * wv.dot(&(a * &wv)) - b.dot(&wv) + lambda * wv.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// Raw output of [`Design::lasso`].
#[derive(Debug, Clone)]
pub struct LassoPath {
    pub weights: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Reduced objective after every sweep, shifted by a constant.
    pub objective_history: Vec<f64>,
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Minimum-norm solution of `g z = b` for symmetric positive semi-definite
/// `g`, discarding eigenvalues below a relative cutoff.
fn sym_min_norm_solve(g: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = g.nrows();
    let eig = SymmetricEigen::new(g);
    let emax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
    let cut = emax * (k as f64) * 1e-14;
    let proj = eig.eigenvectors.tr_mul(b);
    let mut coef = DVector::zeros(k);
    for (i, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > cut {
            coef += eig.eigenvectors.column(i) * (proj[i] / lam);
        }
    }
    coef
}

/// LASSO solution by homotopy: follows the piecewise-linear path from
/// `lambda_max` down to `lambda`, adding a coordinate when its correlation
/// reaches the current penalty and removing one when its weight crosses zero.
/// Returns `None` if an active Gram block turns out singular or the event
/// budget runs out.
fn lasso_homotopy(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, active: &[usize]) -> Option<Vec<f64>> {
    let m = a.nrows();
    let mut w: DVector<f64> = DVector::zeros(m);
    let mut c = b.clone();
    let (j0, lam_max) = active
        .iter()
        .map(|&j| (j, c[j].abs()))
        .max_by(|p, q| p.1.total_cmp(&q.1))?;
    if lam_max <= lambda {
        return Some(vec![0.0; m]);
    }
    let min_step = 1e-13 * lam_max;
    let mut lam = lam_max;
    let mut set = vec![j0];
    let mut sign = vec![0.0; m];
    sign[j0] = c[j0].signum();
    let mut in_set = vec![false; m];
    in_set[j0] = true;

    for _ in 0..(20 * active.len() + 50) {
        let k = set.len();
        let g = DMatrix::from_fn(k, k, |r, s| a[(set[r], set[s])]);
        let s_a = DVector::from_fn(k, |r, _| sign[set[r]]);
        let d = sym_min_norm_solve(g.clone(), &s_a);
        if (&g * &d - &s_a).amax() > 1e-8 {
            return None;
        }
        let mut dir: DVector<f64> = DVector::zeros(m);
        for (r, &j) in set.iter().enumerate() {
            dir[j] = d[r];
        }
        let ad = a * &dir;

        let mut step = lam - lambda;
        let mut event: Option<(usize, bool)> = None;
        for &j in active {
            if in_set[j] {
                if dir[j] != 0.0 && w[j] != 0.0 {
                    let t = -w[j] / dir[j];
                    if t > min_step && t < step {
                        step = t;
                        event = Some((j, false));
                    }
                }
            } else {
                for t in [(lam - c[j]) / (1.0 - ad[j]), (lam + c[j]) / (1.0 + ad[j])] {
                    if t.is_finite() && t > min_step && t < step {
                        step = t;
                        event = Some((j, true));
                    }
                }
            }
        }
        w += &dir * step;
        lam -= step;
        match event {
            None => return Some(w.iter().copied().collect()),
            Some((j, false)) => {
                w[j] = 0.0;
                in_set[j] = false;
                sign[j] = 0.0;
                set.retain(|&i| i != j);
            }
            Some((j, true)) => {
                in_set[j] = true;
                set.push(j);
            }
        }
        c = b - a * &w;
        for &j in &set {
            if sign[j] == 0.0 {
                sign[j] = c[j].signum();
            }
        }
        if set.is_empty() {
            return None;
        }
    }
    None
}

fn stationarity(grad: &DVector<f64>, w: &[f64], lambda: f64, active: &[usize]) -> f64 {
    active
        .iter()
        .map(|&j| {
            if w[j] != 0.0 {
                (grad[j] - lambda * w[j].signum()).abs()
            } else {
                (grad[j].abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn penalties(x: &DMatrix<f64>, lambda: f64, penalize_constant: bool) -> Vec<f64> {
    let design_intercept = if penalize_constant {
        None
    } else {
        (0..x.ncols()).find(|&j| {
            let c = x.column(j);
            c[0] != 0.0 && c.iter().all(|v| *v == c[0])
        })
    };
    (0..x.ncols())
        .map(|j| if Some(j) == design_intercept { 0.0 } else { lambda })
        .collect()
}

/// LASSO fit of `y` on `x`.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &LassoConfig) -> Result<FitResult> {
    lasso_cd_with_history(x, y, cfg).map(|(fit, _)| fit)
}

/// [`lasso_cd`] that also returns the objective after every sweep.
pub fn lasso_cd_with_history(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &LassoConfig,
) -> Result<(FitResult, Vec<f64>)> {
    check_problem(x, y)?;
    cfg.validate()?;
    let design = Design::new(x.clone())?;
    let stats = design.target_stats(y)?;
    let path = design.lasso(&stats, cfg)?;
    let pen = penalties(x, cfg.lambda, cfg.penalize_constant);
    let objective = half_mse(x, y, &path.weights)
        + path.weights.iter().zip(&pen).map(|(w, p)| p * w.abs()).sum::<f64>();
    Ok((
        FitResult {
            support: support_of(&path.weights),
            weights: path.weights,
            iterations: path.sweeps,
            converged: path.converged,
            objective,
        },
        path.objective_history,
    ))
}

/// Largest violation of the LASSO stationarity conditions with a uniform
/// penalty `lambda` on every coordinate.
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], lambda: f64) -> f64 {
    kkt_violation_weighted(x, y, w, &vec![lambda; x.ncols()])
}

/// [`kkt_violation`] with a per-coordinate penalty (0 for an unpenalized
/// intercept).
pub fn kkt_violation_weighted(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], penalty: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    let r = residual(x, y, w);
    let corr = x.tr_mul(&r) / n;
    corr.iter()
        .zip(w)
        .zip(penalty)
        .map(|((c, wj), lam)| {
            if *wj != 0.0 {
                (c - lam * wj.signum()).abs()
            } else {
                (c.abs() - lam).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Per-coordinate penalties `lasso_cd` applies to `x` under `cfg`.
pub fn lasso_penalties(x: &DMatrix<f64>, cfg: &LassoConfig) -> Vec<f64> {
    penalties(x, cfg.lambda, cfg.penalize_constant)
}
