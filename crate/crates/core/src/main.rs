use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use lqprune::bounds::{evaluate, layer_stats, layer_stats_surviving, BoundInput, BoundVariant};
use lqprune::dataset::{load_csv, save_csv, split, synth_regression, Dataset, ScalerParams, TargetScaler};
use lqprune::experiment::{format_table, run_experiment, write_outputs, ExperimentConfig};
use lqprune::network::{ActivationKind, Network};
use lqprune::pruner::{evaluate_pruned, prune_baseline, PruneContext, PruneOptions, PruneStrategy};
use lqprune::solvers::LassoConfig;
use lqprune::trainer::{mse, train_with_log, write_log_csv, Architecture};
use lqprune::{Error, Result};

#[derive(Parser)]
#[command(name = "lqprune", version, about = "Train, prune and bound fully connected regression networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a CSV file.
    Train(TrainArgs),
    /// Prune a trained network.
    Prune(PruneArgs),
    /// Evaluate an error bound for a network.
    Bound(BoundArgs),
    /// Run the replicated pruning experiment.
    Experiment(ExperimentArgs),
    /// Write a synthetic sparse linear regression dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// Feature scaler written by `train`; applied before use.
    #[arg(long)]
    scaler: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let data = load_csv(&self.data, &self.target)?;
        match &self.scaler {
            Some(p) => ScalerParams::load(p)?.transform(&data),
            None => Ok(data),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment-style JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    standardize_targets: bool,
    /// Directory for weights.json, train_log.csv and scaler.json.
    #[arg(long, default_value = "train_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("strategy").required(true).args(["abp_m", "abp_l", "baseline"])))]
struct PruneArgs {
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Magnitude selection with a sparsity-index keep-count and OLS re-fit.
    #[arg(long, requires_all = ["q", "eta"])]
    abp_m: bool,
    /// LASSO re-fit.
    #[arg(long, requires = "lambda")]
    abp_l: bool,
    /// Zero a fixed fraction of the smallest weights.
    #[arg(long, requires = "p")]
    baseline: bool,
    #[arg(long, value_parser = parse_q_open)]
    q: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "pruned.json")]
    out: PathBuf,
    #[arg(long, default_value = "prune_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of layers `S` counted from the output.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// One value for all layers or one per layer.
    #[arg(long, value_delimiter = ',', value_parser = parse_q_closed, default_value = "0.5")]
    q: Vec<f64>,
    /// Kept counts per layer (one value broadcasts); defaults to the largest
    /// per-neuron nonzero count in each layer.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Lipschitz constant; defaults to that of the network's activation.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value = "theorem1")]
    variant: BoundVariant,
    #[arg(long, default_value_t = 0.0)]
    base_error: f64,
    /// Restrict `t_k` to neurons that still reach the output.
    #[arg(long)]
    surviving: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    /// Number of nonzero coefficients.
    #[arg(long)]
    sparsity: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; the ground truth goes next to it with a `.json` extension.
    #[arg(long)]
    out: PathBuf,
}

fn parse_q_open(s: &str) -> std::result::Result<f64, String> {
    let q: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(format!("q must lie in (0, 1), got {q}"))
    }
}

fn parse_q_closed(s: &str) -> std::result::Result<f64, String> {
    let q: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if q > 0.0 && q <= 1.0 {
        Ok(q)
    } else {
        Err(format!("q must lie in (0, 1], got {q}"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            target: "y".into(),
            ..Default::default()
        },
    };
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if let Some(t) = args.target {
        cfg.target = t;
    }
    if let Some(h) = args.hidden {
        cfg.hidden = h;
    }
    if let Some(a) = args.activation {
        cfg.activation = a;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.standardize_targets |= args.standardize_targets;
    cfg.train.seed = cfg.seed;

    let data = load_csv(&cfg.data, &cfg.target)?;
    let (train, val, test) = split(&data, cfg.split, cfg.seed)?;
    let scaler = ScalerParams::fit(&train.features);
    let (mut train, mut val, mut test) = (scaler.transform(&train)?, scaler.transform(&val)?, scaler.transform(&test)?);
    if cfg.standardize_targets {
        let ts = TargetScaler::fit(&train.targets);
        train = ts.transform(&train);
        val = ts.transform(&val);
        test = ts.transform(&test);
    }
    let arch = Architecture::new(train.n_features(), &cfg.hidden, cfg.activation);
    let (net, log) = train_with_log(&arch, &train, Some(&val), &cfg.train)?;

    create_dir(&args.out_dir)?;
    net.save(args.out_dir.join("weights.json"))?;
    write_log_csv(&log, args.out_dir.join("train_log.csv"))?;
    scaler.save(args.out_dir.join("scaler.json"))?;
    println!(
        "trained {:?} for {} epochs: train MSE {:.6}, test MSE {:.6}",
        arch.layer_dims,
        cfg.train.epochs,
        mse(&net, &train)?,
        mse(&net, &test)?
    );
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let net = Network::load(&args.weights)?;
    let data = args.data.load()?;
    let (pruned, report) = if args.baseline {
        prune_baseline(&net, args.p.unwrap_or_default())?
    } else {
        let strategy = if args.abp_m {
            PruneStrategy::AbpM {
                q: args.q.unwrap_or_default(),
                eta: args.eta.unwrap_or_default(),
            }
        } else {
            PruneStrategy::AbpL {
                lasso: LassoConfig::new(args.lambda.unwrap_or_default()),
            }
        };
        let opts = PruneOptions {
            max_rows: args.max_rows,
            seed: args.seed,
        };
        PruneContext::new(&net, &data, opts)?.prune(strategy)?
    };
    pruned.save(&args.out)?;
    write_text(&args.report, &report.to_json()?)?;
    let ev = evaluate_pruned(&net, &pruned, &data);
    println!(
        "{} {}: kept {} of {} weights (compression {}, pruning ratio {:.4})",
        report.strategy.method(),
        report.strategy.params(),
        report.kept_params,
        report.total_params,
        report
            .network_compression_ratio
            .map_or("undefined".to_string(), |c| format!("{c:.4}")),
        report.network_pruning_ratio
    );
    match ev {
        Ok(ev) => println!(
            "MSE {:.6} -> {:.6} (increase ratio {:.4})",
            ev.mse_original, ev.mse_pruned, ev.mse_increase_ratio
        ),
        Err(e) => println!("MSE increase ratio: {e}"),
    }
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<()> {
    let net = Network::load(&args.weights)?;
    let data = args.data.load()?;
    let l = net.depth();
    let broadcast = |v: Vec<f64>| if v.len() == 1 { vec![v[0]; l] } else { v };
    let q = broadcast(args.q);
    let stats = if args.surviving {
        layer_stats_surviving(&net, &data, &q)?
    } else {
        layer_stats(&net, &data, &q)?
    };
    let m = match args.m {
        Some(m) if m.len() == 1 => vec![m[0]; l],
        Some(m) => m,
        None => net
            .layers
            .iter()
            .map(|layer| {
                (0..layer.n_out())
                    .map(|j| layer.row(j).iter().filter(|w| **w != 0.0).count())
                    .max()
                    .unwrap_or(0)
                    .max(1)
            })
            .collect(),
    };
    let mut input = BoundInput::new(stats, m, args.steps, args.rho.unwrap_or(net.activation.lipschitz()));
    input.c = args.c;
    input.base_error = args.base_error;
    let report = evaluate(&input, args.variant)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => write_text(p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if let Some(t) = args.target {
        cfg.target = t;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = args.output_dir {
        cfg.output_dir = o;
    }
    let results = run_experiment(&cfg)?;
    write_outputs(&results, &cfg.output_dir)?;
    print!("{}", format_table(&results));
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (data, meta) = synth_regression(args.n, args.p, args.sparsity, args.noise, args.seed)?;
    save_csv(&data, &args.out)?;
    meta.save(args.out.with_extension("json"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
