//! Replicated train → prune → evaluate runs over a grid of pruning
//! strategies, aggregated into a results table.
//!
//! Replication `r` uses seed `seed + r` for the data split, the weight
//! initialization and the mini-batch order. Features are standardized with
//! statistics from the training part only. Networks are pruned using the
//! training rows and the MSE increase ratio is measured on the test part.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, split, Dataset, ScalerParams, SplitFractions, TargetScaler};
use crate::error::{Error, Result};
use crate::network::ActivationKind;
use crate::pruner::{evaluate_pruned, prune_baseline, PruneContext, PruneOptions, PruneStrategy};
use crate::solvers::LassoConfig;
use crate::trainer::{mse, train_with_log, Architecture, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEta {
    pub q: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyGrid {
    pub lambdas: Vec<f64>,
    /// ABP-M cells as explicit `(q, eta)` pairs.
    pub abp_m: Vec<QEta>,
    pub baseline_p: Vec<f64>,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
}

impl Default for StrategyGrid {
    fn default() -> Self {
        let pair = |q, eta| QEta { q, eta };
        Self {
            lambdas: vec![1e-3, 1e-4, 1e-5],
            abp_m: vec![
                pair(0.3, 0.0),
                pair(0.5, 0.0),
                pair(0.7, 0.0),
                pair(0.5, 0.1),
                pair(0.5, 0.2),
                pair(0.5, 0.3),
            ],
            baseline_p: vec![0.3, 0.5, 0.7],
            lasso_tol: 1e-8,
            lasso_max_iter: 10_000,
        }
    }
}

impl StrategyGrid {
    /// Every cell, ABP-L first, then ABP-M, then the baseline.
    pub fn cells(&self) -> Vec<PruneStrategy> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            let mut lasso = LassoConfig::new(lambda);
            lasso.tol = self.lasso_tol;
            lasso.max_iter = self.lasso_max_iter;
            out.push(PruneStrategy::AbpL { lasso });
        }
        for c in &self.abp_m {
            out.push(PruneStrategy::AbpM { q: c.q, eta: c.eta });
        }
        for &p in &self.baseline_p {
            out.push(PruneStrategy::BaselineMag { p });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub target: String,
    pub split: SplitFractions,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    /// `train.seed` is replaced by the replication seed.
    pub train: TrainConfig,
    pub grid: StrategyGrid,
    pub replications: usize,
    pub output_dir: PathBuf,
    pub standardize_targets: bool,
    /// Cap on the rows used for re-fitting (seeded subsample).
    pub prune_max_rows: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("crates/core/data/california_housing.csv"),
            target: "MedHouseVal".into(),
            split: SplitFractions::default(),
            seed: 0,
            hidden: vec![64, 64, 64],
            activation: ActivationKind::Relu,
            train: TrainConfig::default(),
            grid: StrategyGrid::default(),
            replications: 20,
            output_dir: PathBuf::from("experiment_out"),
            standardize_targets: false,
            prune_max_rows: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::dataset::read_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::param("replications must be >= 1"));
        }
        let g = &self.grid;
        if g.lambdas.is_empty() && g.abp_m.is_empty() && g.baseline_p.is_empty() {
            return Err(Error::param("the strategy grid is empty"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::param("hidden widths must be >= 1"));
        }
        self.train.validate()?;
        for s in g.cells() {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub method: String,
    pub params: String,
    pub replication: usize,
    pub seed: u64,
    pub compression_ratio: Option<f64>,
    pub pruning_ratio: Option<f64>,
    pub mse_original: Option<f64>,
    pub mse_pruned: Option<f64>,
    pub mse_increase: Option<f64>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub replication: usize,
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub params: String,
    pub compression_ratio_mean: f64,
    pub compression_ratio_se: f64,
    pub pruning_ratio_mean: f64,
    pub pruning_ratio_se: f64,
    pub mse_increase_mean: f64,
    pub mse_increase_se: f64,
    #[serde(skip)]
    pub n_ok: usize,
    #[serde(skip)]
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    /// Ordered by cell, then replication.
    pub records: Vec<ReplicationRecord>,
    pub cells: Vec<CellSummary>,
    pub training: Vec<TrainingSummary>,
}

impl ExperimentResults {
    pub fn cell(&self, method: &str, params: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.params == params)
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
/// The error is NaN with fewer than two values; both are NaN for none.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn prepare(data: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, val, test) = split(data, cfg.split, seed)?;
    let scaler = ScalerParams::fit(&train.features);
    let (mut train, mut val, mut test) = (
        scaler.transform(&train)?,
        scaler.transform(&val)?,
        scaler.transform(&test)?,
    );
    if cfg.standardize_targets {
        let ts = TargetScaler::fit(&train.targets);
        train = ts.transform(&train);
        val = ts.transform(&val);
        test = ts.transform(&test);
    }
    Ok((train, val, test))
}

fn failed(strategy: &PruneStrategy, r: usize, seed: u64, err: &Error) -> ReplicationRecord {
    ReplicationRecord {
        method: strategy.method().into(),
        params: strategy.params(),
        replication: r,
        seed,
        compression_ratio: None,
        pruning_ratio: None,
        mse_original: None,
        mse_pruned: None,
        mse_increase: None,
        error: Some(err.to_string()),
    }
}

fn run_replication(
    data: &Dataset,
    cfg: &ExperimentConfig,
    cells: &[PruneStrategy],
    r: usize,
) -> (Option<TrainingSummary>, Vec<ReplicationRecord>) {
    let seed = cfg.seed.wrapping_add(r as u64);
    let trained = (|| {
        let (train, val, test) = prepare(data, cfg, seed)?;
        let arch = Architecture::new(train.n_features(), &cfg.hidden, cfg.activation);
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let (net, _) = train_with_log(&arch, &train, Some(&val), &tc)?;
        let summary = TrainingSummary {
            replication: r,
            seed,
            train_mse: mse(&net, &train)?,
            test_mse: mse(&net, &test)?,
        };
        let opts = PruneOptions {
            max_rows: cfg.prune_max_rows,
            seed,
        };
        let ctx = PruneContext::new(&net, &train, opts)?;
        Ok::<_, Error>((summary, ctx, test))
    })();
    let (summary, ctx, test) = match trained {
        Ok(t) => t,
        Err(e) => return (None, cells.iter().map(|s| failed(s, r, seed, &e)).collect()),
    };
    let records = cells
        .iter()
        .map(|s| {
            let outcome = match s {
                PruneStrategy::BaselineMag { p } => prune_baseline(ctx.original(), *p),
                _ => ctx.prune(*s),
            }
            .and_then(|(pruned, report)| {
                let ev = evaluate_pruned(ctx.original(), &pruned, &test)?;
                let cr = report
                    .network_compression_ratio
                    .ok_or_else(|| Error::Undefined("every weight was pruned".into()))?;
                Ok((cr, report.network_pruning_ratio, ev))
            });
            match outcome {
                Ok((cr, pr, ev)) => ReplicationRecord {
                    method: s.method().into(),
                    params: s.params(),
                    replication: r,
                    seed,
                    compression_ratio: Some(cr),
                    pruning_ratio: Some(pr),
                    mse_original: Some(ev.mse_original),
                    mse_pruned: Some(ev.mse_pruned),
                    mse_increase: Some(ev.mse_increase_ratio),
                    error: None,
                },
                Err(e) => failed(s, r, seed, &e),
            }
        })
        .collect();
    (Some(summary), records)
}

/// Runs the experiment on an already loaded dataset.
pub fn run_on_dataset(data: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let cells = cfg.grid.cells();
    let per_rep: Vec<_> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(data, cfg, &cells, r))
        .collect();

    let mut training = Vec::new();
    let mut by_cell: Vec<Vec<ReplicationRecord>> = vec![Vec::new(); cells.len()];
    for (summary, recs) in per_rep {
        training.extend(summary);
        for (i, rec) in recs.into_iter().enumerate() {
            by_cell[i].push(rec);
        }
    }
    let summaries = by_cell
        .iter()
        .zip(&cells)
        .map(|(recs, s)| summarize(s, recs))
        .collect();
    Ok(ExperimentResults {
        config: cfg.clone(),
        records: by_cell.into_iter().flatten().collect(),
        cells: summaries,
        training,
    })
}

fn summarize(strategy: &PruneStrategy, recs: &[ReplicationRecord]) -> CellSummary {
    let ok: Vec<&ReplicationRecord> = recs.iter().filter(|r| r.ok()).collect();
    let col = |f: fn(&ReplicationRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let (crm, crs) = mean_se(&col(|r| r.compression_ratio));
    let (prm, prs) = mean_se(&col(|r| r.pruning_ratio));
    let (mim, mis) = mean_se(&col(|r| r.mse_increase));
    CellSummary {
        method: strategy.method().into(),
        params: strategy.params(),
        compression_ratio_mean: crm,
        compression_ratio_se: crs,
        pruning_ratio_mean: prm,
        pruning_ratio_se: prs,
        mse_increase_mean: mim,
        mse_increase_se: mis,
        n_ok: ok.len(),
        n_failed: recs.len() - ok.len(),
    }
}

/// Loads the configured CSV and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let data = load_csv(&cfg.data, &cfg.target)?;
    run_on_dataset(&data, cfg)
}

pub fn format_table(results: &ExperimentResults) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<16} {:>16} {:>16} {:>18}",
        "Method", "Params", "Compression", "Pruning", "MSE increase"
    );
    for c in &results.cells {
        let cell = |m: f64, s: f64| format!("{m:.2} ({s:.2})");
        let _ = write!(
            out,
            "{:<6} {:<16} {:>16} {:>16} {:>18}",
            c.method,
            c.params,
            cell(c.compression_ratio_mean, c.compression_ratio_se),
            cell(c.pruning_ratio_mean, c.pruning_ratio_se),
            cell(c.mse_increase_mean, c.mse_increase_se),
        );
        if c.n_failed > 0 {
            let _ = write!(out, "  [{} of {} failed]", c.n_failed, c.n_failed + c.n_ok);
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "\n{} replications; standard errors in parentheses; MSE increase measured on the test split.",
        results.config.replications
    );
    out
}

#[derive(Serialize)]
struct Metadata<'a> {
    evaluation_split: &'a str,
    pruning_rows: &'a str,
    replications: usize,
    cells: usize,
    failed_records: usize,
}

/// Writes `results.csv`, `replications.csv`, `training.csv`, `table.txt`,
/// `effective_config.json` and `metadata.json` into `dir`.
pub fn write_outputs(results: &ExperimentResults, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join("results.csv"), &results.cells)?;
    write_rows(&dir.join("replications.csv"), &results.records)?;
    write_rows(&dir.join("training.csv"), &results.training)?;
    let table = dir.join("table.txt");
    std::fs::write(&table, format_table(results)).map_err(|e| Error::io(&table, e))?;
    crate::dataset::write_json(dir.join("effective_config.json"), &results.config)?;
    let meta = Metadata {
        evaluation_split: "test",
        pruning_rows: "train",
        replications: results.config.replications,
        cells: results.cells.len(),
        failed_records: results.records.iter().filter(|r| !r.ok()).count(),
    };
    crate::dataset::write_json(dir.join("metadata.json"), &meta)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
