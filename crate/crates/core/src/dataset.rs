//! Tabular regression data: CSV ingestion, standardization, seeded splits
//! and a synthetic sparse-linear generator used as a test fixture.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x p`, one row per sample.
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        targets: DVector<f64>,
        feature_names: Vec<String>,
        target_name: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::param("dataset needs at least one row"));
        }
        if features.ncols() == 0 {
            return Err(Error::param("dataset needs at least one feature"));
        }
        if targets.len() != features.nrows() {
            return Err(Error::Dimension {
                context: "dataset targets",
                expected: features.nrows(),
                got: targets.len(),
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Dimension {
                context: "dataset feature names",
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::param("dataset contains non-finite values"));
        }
        Ok(Self {
            features,
            targets,
            feature_names,
            target_name: target_name.into(),
        })
    }

    /// Builds a dataset with generated names `x0..x{p-1}` and target `y`.
    pub fn from_parts(features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, targets, names, "y")
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let p = self.n_features();
        let features = DMatrix::from_fn(rows.len(), p, |i, j| self.features[(rows[i], j)]);
        let targets = DVector::from_fn(rows.len(), |i, _| self.targets[rows[i]]);
        Dataset {
            features,
            targets,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

/// Reads a headered, comma-separated file; `target_column` becomes the
/// response and every other column a feature.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_owned()))?;
    if headers.len() < 2 {
        return Err(Error::param("CSV needs at least one feature column besides the target"));
    }

    let p = headers.len() - 1;
    let mut values: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].clone(),
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: headers[c].clone(),
                    value: cell.to_owned(),
                });
            }
            if c == target_idx {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let n = targets.len();
    let features = DMatrix::from_row_slice(n, p, &values);
    let feature_names = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    Dataset::new(features, DVector::from_vec(targets), feature_names, target_column)
}

/// Writes features followed by the target column. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header)?;
    for i in 0..data.n_rows() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.targets[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-column affine map to zero mean, unit population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    /// 1.0 for constant columns.
    pub stddevs: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ScalerParams {
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows() as f64;
        let p = features.ncols();
        let mut means = Vec::with_capacity(p);
        let mut stddevs = Vec::with_capacity(p);
        let mut constant = Vec::with_capacity(p);
        for col in features.column_iter() {
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            let mean = col.sum() / n;
            if lo == hi {
                means.push(lo);
                stddevs.push(1.0);
                constant.push(true);
            } else {
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                means.push(mean);
                stddevs.push(var.sqrt());
                constant.push(false);
            }
        }
        Self {
            means,
            stddevs,
            constant,
        }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        self.check_width(data.n_features())?;
        let mut out = data.clone();
        for (j, mut col) in out.features.column_iter_mut().enumerate() {
            if self.constant[j] {
                col.fill(0.0);
            } else {
                col.apply(|v| *v = (*v - self.means[j]) / self.stddevs[j]);
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, data: &Dataset) -> Result<Dataset> {
        self.check_width(data.n_features())?;
        let mut out = data.clone();
        for (j, mut col) in out.features.column_iter_mut().enumerate() {
            if self.constant[j] {
                col.fill(self.means[j]);
            } else {
                col.apply(|v| *v = *v * self.stddevs[j] + self.means[j]);
            }
        }
        Ok(out)
    }

    fn check_width(&self, p: usize) -> Result<()> {
        if p != self.means.len() {
            return Err(Error::Dimension {
                context: "scaler width",
                expected: self.means.len(),
                got: p,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

/// Affine map applied to the response when target standardization is on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub stddev: f64,
}

impl TargetScaler {
    pub fn fit(targets: &DVector<f64>) -> Self {
        let n = targets.len() as f64;
        let mean = targets.sum() / n;
        let var = targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let stddev = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, stddev }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        out.targets.apply(|v| *v = (*v - self.mean) / self.stddev);
        out
    }
}

/// Standardizes the feature columns (population convention). Constant columns
/// become zeros and are flagged in the returned parameters; targets are left
/// untouched.
pub fn standardize(data: &Dataset) -> Result<(Dataset, ScalerParams)> {
    if data.n_rows() < 2 {
        return Err(Error::param("standardize needs at least two rows"));
    }
    let params = ScalerParams::fit(&data.features);
    let out = params.transform(data)?;
    Ok((out, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Shuffles rows with a seeded generator and cuts them into train /
/// validation / test. Train and validation sizes are `round(f * N)`; the test
/// part takes whatever remains.
pub fn split(
    data: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let SplitFractions { train, val, test } = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(Error::param("split fractions must all be positive"));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!(
            "split fractions must sum to 1, got {}",
            train + val + test
        )));
    }
    let n = data.n_rows();
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let (a, rest) = order.split_at(n_train);
    let (b, c) = rest.split_at(n_val);
    Ok((data.select_rows(a), data.select_rows(b), data.select_rows(c)))
}

/// Ground truth behind a synthetic dataset; written next to the CSV as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub n: usize,
    pub p: usize,
    pub coefficients: Vec<f64>,
    pub support: Vec<usize>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SynthMeta {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// Standard normal features with a linear response on exactly `sparsity`
/// randomly placed coefficients (magnitudes in `[0.5, 2]`, random sign) plus
/// Gaussian noise.
pub fn synth_regression(
    n: usize,
    p: usize,
    sparsity: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(Dataset, SynthMeta)> {
    if n == 0 || p == 0 {
        return Err(Error::param("synthetic data needs n >= 1 and p >= 1"));
    }
    if sparsity > p {
        return Err(Error::param(format!("sparsity {sparsity} exceeds p = {p}")));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::param("noise_sd must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut rng);
    let mut support: Vec<usize> = idx[..sparsity].to_vec();
    support.sort_unstable();
    let mut coefficients = vec![0.0; p];
    for &j in &support {
        let mag: f64 = rng.random_range(0.5..=2.0);
        coefficients[j] = if rng.random_bool(0.5) { mag } else { -mag };
    }

    let features = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = DVector::from_column_slice(&coefficients);
    let mut targets = &features * &beta;
    if noise_sd > 0.0 {
        for v in targets.iter_mut() {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let data = Dataset::from_parts(features, targets)?;
    let meta = SynthMeta {
        n,
        p,
        coefficients,
        support,
        noise_sd,
        seed,
    };
    Ok((data, meta))
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
