//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any criterion fails.
//!
//! Criteria 1-3 run the full California Housing experiment (20 replications),
//! which takes several minutes.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lqprune::bounds::{magnitude_bound, theorem1_bound, BoundInput, LayerStats};
use lqprune::dataset::{split, Dataset, SplitFractions};
use lqprune::experiment::{run_experiment, write_outputs, ExperimentConfig, ExperimentResults};
use lqprune::network::{ActivationKind, LayerWeights, Network};
use lqprune::pruner::{PruneContext, PruneOptions, PruneStrategy};
use lqprune::solvers::{lasso_cd, LassoConfig};
use lqprune::sparsity::{keep_count_bound, sparsity_index, threshold_support};
use lqprune::trainer::{gradient, init_network, Architecture, Init};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn lq(w: &[f64], q: f64) -> f64 {
    w.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q)
}

/// Vector with entries spread over several orders of magnitude, some exact
/// zeros and some repeated values.
fn mixed_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..d)
        .map(|_| {
            let scale = 10f64.powi(rng.random_range(-4..=3));
            let v: f64 = rng.sample(StandardNormal);
            match rng.random_range(0..10) {
                0 => 0.0,
                1 => scale,
                _ => v * scale,
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        w[0] = 1.0;
    }
    w
}

// ---- experiment-backed criteria ----------------------------------------

fn experiment() -> (ExperimentResults, f64) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let cfg = ExperimentConfig {
        data: root.join("data/california_housing.csv"),
        output_dir: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_experiment"),
        ..Default::default()
    };
    let t0 = Instant::now();
    let res = run_experiment(&cfg).expect("experiment runs");
    let secs = t0.elapsed().as_secs_f64();
    write_outputs(&res, &cfg.output_dir).expect("outputs written");
    print!("{}", lqprune::experiment::format_table(&res));
    println!("experiment outputs in {}", cfg.output_dir.display());
    (res, secs)
}

fn criterion_1(res: &ExperimentResults, secs: f64) -> Outcome {
    let lasso: Vec<_> = res.cells.iter().filter(|c| c.method == "ABP-L").collect();
    let mag: Vec<_> = res.cells.iter().filter(|c| c.method == "Mag").collect();
    let mut pairs = Vec::new();
    let mut ok = true;
    for l in &lasso {
        for m in &mag {
            let rel = (l.compression_ratio_mean / m.compression_ratio_mean - 1.0).abs();
            if rel <= 0.15 {
                let halved = l.mse_increase_mean <= 0.5 * m.mse_increase_mean;
                ok &= halved;
                pairs.push(format!(
                    "{} (CR {:.2}, dMSE {:.4}) vs {} (CR {:.2}, dMSE {:.4}) {}",
                    l.params,
                    l.compression_ratio_mean,
                    l.mse_increase_mean,
                    m.params,
                    m.compression_ratio_mean,
                    m.mse_increase_mean,
                    if halved { "ok" } else { "NOT halved" }
                ));
            }
        }
    }
    let in_time = secs <= 1800.0;
    let pass = ok && !pairs.is_empty() && in_time;
    let detail = if pairs.is_empty() {
        format!("no ABP-L/Mag pair within 15% compression ratio; runtime {secs:.0}s")
    } else {
        format!("{}; runtime {secs:.0}s", pairs.join("; "))
    };
    outcome(pass, detail)
}

fn criterion_2(res: &ExperimentResults) -> Outcome {
    let cells: Vec<_> = ["lambda=1e-5", "lambda=1e-4", "lambda=1e-3"]
        .iter()
        .map(|p| res.cell("ABP-L", p).expect("lambda cell"))
        .collect();
    let pr: Vec<f64> = cells.iter().map(|c| c.pruning_ratio_mean).collect();
    let dm: Vec<f64> = cells.iter().map(|c| c.mse_increase_mean).collect();
    let pass = pr[0] < pr[1] && pr[1] < pr[2] && dm[0] <= dm[1] && dm[1] <= dm[2];
    outcome(
        pass,
        format!("pruning ratio {pr:.4?}, MSE increase {dm:.5?} for lambda 1e-5, 1e-4, 1e-3"),
    )
}

fn criterion_3(res: &ExperimentResults) -> Outcome {
    let pr: Vec<f64> = ["eta=0 q=0.3", "eta=0 q=0.5", "eta=0 q=0.7"]
        .iter()
        .map(|p| res.cell("ABP-M", p).expect("q cell").pruning_ratio_mean)
        .collect();
    outcome(pr[0] < pr[1] && pr[1] < pr[2], format!("pruning ratio {pr:.4?} for q 0.3, 0.5, 0.7"))
}

// ---- sparsity criteria ---------------------------------------------------

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=64);
        let w = mixed_vector(&mut rng, d);
        for q in [0.3, 0.5, 0.7] {
            let m = rng.random_range(1..=d);
            let t = lq(&w, q);
            let cut = t * (m as f64).powf(-1.0 / q);
            let got = threshold_support(&w, q, m).unwrap();
            // membership must follow the definition except within rounding of the cut
            let misplaced = (0..d).any(|j| {
                let a = w[j].abs();
                (a > cut * (1.0 + 1e-12) && !got.contains(&j)) || (a < cut * (1.0 - 1e-12) && got.contains(&j))
            });
            let outside: f64 = (0..d).filter(|j| !got.contains(j)).map(|j| w[j].abs()).sum();
            let cap = t * (m as f64).powf(1.0 - 1.0 / q);
            if misplaced || got.len() > m || outside > cap * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("30000 (vector, q) cases, {violations} violations"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=64);
        let w = mixed_vector(&mut rng, d);
        let q = rng.random_range(0.05..0.95);
        let si = sparsity_index(&w, q).unwrap().unwrap();
        let lower = (d as f64).powf(1.0 - 1.0 / q);
        if si > 1.0 + 1e-12 || si < lower * (1.0 - 1e-12) {
            violations += 1;
        }
    }
    // exact attainment where the arithmetic is exact
    let mut exact = true;
    for d in [1usize, 2, 4, 8, 16, 32, 64] {
        let mut one_hot = vec![0.0; d];
        one_hot[d / 2] = -3.0;
        exact &= sparsity_index(&one_hot, 0.5).unwrap() == Some(1.0);
        exact &= sparsity_index(&one_hot, 0.3).unwrap() == Some(1.0);
        let uniform = vec![1.0; d];
        exact &= sparsity_index(&uniform, 0.5).unwrap() == Some(1.0 / d as f64);
    }
    // other q: attainment to rounding
    let mut near = true;
    for d in [3usize, 7, 10, 50] {
        for q in [0.3, 0.7] {
            let si = sparsity_index(&vec![2.5; d], q).unwrap().unwrap();
            near &= ((si - (d as f64).powf(1.0 - 1.0 / q)) / si).abs() < 1e-12;
        }
    }
    outcome(
        violations == 0 && exact && near,
        format!("{violations} bound violations in 10000 vectors; boundary attainment exact: {exact}, others within 1e-12: {near}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..5_000 {
        let d = rng.random_range(1..=12);
        let w = mixed_vector(&mut rng, d);
        let q = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let eta = [0.0, 0.1, 0.2, 0.3, rng.random_range(0.0..2.0)][rng.random_range(0..5)];
        let bound = keep_count_bound(&w, q, eta).unwrap();
        let mut mags: Vec<f64> = w.iter().map(|v| v.abs().powf(q)).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        for m in 1..=d {
            let head: f64 = mags[..m].iter().sum();
            let tail: f64 = mags[m..].iter().sum();
            if tail <= eta * head {
                checked += 1;
                if (m as f64) < bound * (1.0 - 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("{checked} (vector, m) pairs meeting the tail condition, {violations} below the bound"),
    )
}

// ---- solver criterion ----------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_kkt = 0.0f64;
    let mut unconverged = 0usize;
    for _ in 0..1_000 {
        let n = rng.random_range(5..=500);
        let m = rng.random_range(1..=50);
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = DVector::from_fn(m, |_, _| if rng.random_bool(0.3) { rng.random_range(-2.0..2.0) } else { 0.0 });
        let noise = DVector::from_fn(n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let y = &x * beta + noise;
        let lambda = 10f64.powf(rng.random_range(-6.0..=0.0));
        let fit = lasso_cd(&x, &y, &LassoConfig::new(lambda)).unwrap();
        unconverged += usize::from(!fit.converged);
        // stationarity from scratch: X^T (y - Xw) / N against the subgradient
        let w = DVector::from_vec(fit.weights.clone());
        let corr = x.tr_mul(&(&y - &x * &w)) / n as f64;
        for j in 0..m {
            let v = if w[j] != 0.0 {
                (corr[j] - lambda * w[j].signum()).abs()
            } else {
                (corr[j].abs() - lambda).max(0.0)
            };
            worst_kkt = worst_kkt.max(v);
        }
    }

    let mut worst_ols = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(1..=20);
        let n = rng.random_range(3 * m..=300);
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = lasso_cd(&x, &y, &LassoConfig::new(0.0)).unwrap();
        // least squares through thin QR: R w = Q^T y
        let qr = x.clone().qr();
        let ols = qr.r().solve_upper_triangular(&qr.q().tr_mul(&y)).expect("full column rank");
        for j in 0..m {
            worst_ols = worst_ols.max((fit.weights[j] - ols[j]).abs());
        }
    }

    let mut worst_soft = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=100);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = rng.random_range(0.0..0.5);
        let xy = x.column(0).dot(&y) / n as f64;
        let xx = x.column(0).norm_squared() / n as f64;
        let expect = xy.signum() * (xy.abs() - lambda).max(0.0) / xx;
        let fit = lasso_cd(&x, &y, &LassoConfig::new(lambda)).unwrap();
        worst_soft = worst_soft.max((fit.weights[0] - expect).abs());
    }

    let pass = worst_kkt <= 1e-6 && worst_ols <= 1e-6 && worst_soft <= 1e-10;
    outcome(
        pass,
        format!(
            "max KKT violation {worst_kkt:.2e} ({unconverged} hit max_iter); lambda=0 vs OLS {worst_ols:.2e}; single feature {worst_soft:.2e}"
        ),
    )
}

// ---- gradient criterion --------------------------------------------------

fn central_difference(net: &Network, x: &DMatrix<f64>, y: &DVector<f64>, k: usize, r: usize, c: usize, h: f64) -> f64 {
    let loss = |n: &Network| {
        let p = n.predict(x).unwrap();
        (p - y).norm_squared() / y.len() as f64
    };
    let mut probe = net.clone();
    let w0 = net.layers[k].weights[(r, c)];
    probe.layers[k].weights[(r, c)] = w0 + h;
    let up = loss(&probe);
    probe.layers[k].weights[(r, c)] = w0 - h;
    let down = loss(&probe);
    (up - down) / (2.0 * h)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut nets = 0usize;
    while nets < 100 {
        let act = if nets.is_multiple_of(2) { ActivationKind::Tanh } else { ActivationKind::Relu };
        let p = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=5)).collect();
        let arch = Architecture::new(p, &hidden, act);
        let mut net = init_network(&arch, Init::UniformHe, rng.random()).unwrap();
        for layer in &mut net.layers {
            for v in layer.weights.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = rng.random_range(3..=12);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // keep only rows whose hidden pre-activations stay clear of the kink
        let trace = net.trace_matrix(&x).unwrap();
        let rows: Vec<usize> = (0..n)
            .filter(|&i| {
                act != ActivationKind::Relu
                    || (1..net.depth()).all(|k| trace.pre_activation(k).row(i).iter().all(|z| z.abs() > 1e-3))
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let analytic = gradient(&net, &x, &y).unwrap();
        for k in 0..net.depth() {
            let (nr, nc) = net.layers[k].weights.shape();
            for r in 0..nr {
                for c in 0..nc {
                    let a = analytic[k][(r, c)];
                    let fd = central_difference(&net, &x, &y, k, r, c, h);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        nets += 1;
    }
    outcome(worst < 1e-5, format!("100 nets (tanh and ReLU), max relative error {worst:.2e}"))
}

// ---- bound criterion -----------------------------------------------------

fn theorem1_oracle(input: &BoundInput) -> f64 {
    let st = &input.stats;
    let l = st.t.len();
    let mut total = input.base_error;
    for s in 1..=input.steps {
        let prod: f64 = (1..=s).map(|u| st.t[l - u]).product();
        let k = l - s;
        total += input.rho.powi(s as i32 - 1)
            * input.c
            * prod
            * (input.m[k] as f64).powf(0.5 - 1.0 / st.q[k])
            * st.max_f_norm[k];
    }
    total
}

fn random_bound_input(rng: &mut ChaCha8Rng) -> BoundInput {
    let l = rng.random_range(1..=5);
    let n: Vec<usize> = (0..l).map(|_| rng.random_range(1..=80)).collect();
    let stats = LayerStats {
        t: (0..l).map(|_| rng.random_range(0.0..5.0)).collect(),
        q: (0..l).map(|_| rng.random_range(0.05..=1.0)).collect(),
        max_f_norm: (0..l).map(|_| rng.random_range(0.0..3.0)).collect(),
        n: n.clone(),
    };
    let m = n.iter().map(|&nk| rng.random_range(1..=nk)).collect();
    let mut input = BoundInput::new(stats, m, rng.random_range(1..=l), rng.random_range(0.0..2.0));
    input.base_error = rng.random_range(0.0..1.0);
    input
}

fn criterion_9() -> Outcome {
    let fixture = BoundInput::new(
        LayerStats {
            t: vec![1.0],
            q: vec![0.5],
            n: vec![10],
            max_f_norm: vec![1.0],
        },
        vec![4],
        1,
        1.0,
    );
    let unit = theorem1_bound(&fixture).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut mono, mut dominance, mut formula) = (0usize, 0usize, 0usize);
    for _ in 0..1_000 {
        let input = random_bound_input(&mut rng);
        let b = theorem1_bound(&input).unwrap();
        let oracle = theorem1_oracle(&input);
        if (b - oracle).abs() > 1e-12 * oracle.abs().max(1.0) {
            formula += 1;
        }
        for k in 0..input.m.len() {
            if input.m[k] < input.stats.n[k] {
                let mut bigger = input.clone();
                bigger.m[k] += 1;
                if theorem1_bound(&bigger).unwrap() > b {
                    mono += 1;
                }
            }
        }
        if magnitude_bound(&input).unwrap() < b * (1.0 - 1e-12) {
            dominance += 1;
        }
    }
    outcome(
        unit == 0.125 && mono == 0 && dominance == 0 && formula == 0,
        format!(
            "unit fixture {unit}; {mono} monotonicity, {dominance} dominance, {formula} formula violations in 1000 inputs"
        ),
    )
}

// ---- lossless fixture ----------------------------------------------------

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dims = [5usize, 7, 6, 1];
    let mut layers = Vec::new();
    for k in 1..dims.len() {
        let cols = dims[k - 1] + 1;
        let mut w = DMatrix::zeros(dims[k], cols);
        for j in 0..dims[k] {
            let mut v = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) {
                v = -v;
            }
            w[(j, rng.random_range(0..cols))] = v;
        }
        layers.push(LayerWeights::dense(w));
    }
    let net = Network::new(ActivationKind::Relu, layers).unwrap();
    let x = DMatrix::from_fn(400, dims[0], |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = net.predict(&x).unwrap();
    let data = Dataset::from_parts(x, y).unwrap();
    let (train, _, test) = split(&data, SplitFractions::default(), 10).unwrap();
    let ctx = PruneContext::new(&net, &train, PruneOptions::default()).unwrap();
    let (pruned, report) = ctx.prune(PruneStrategy::AbpM { q: 0.5, eta: 0.0 }).unwrap();
    let before = net.predict(&test.features).unwrap();
    let after = pruned.predict(&test.features).unwrap();
    let max_delta = (after - before).amax();
    outcome(
        max_delta < 1e-9,
        format!(
            "max |prediction change| {max_delta:.2e} over {} test rows; kept {} of {} weights",
            test.n_rows(),
            report.kept_params,
            report.total_params
        ),
    )
}

fn main() {
    // `cargo test -- --list` and similar harness probes
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let names = [
        "matched-compression dominance of ABP-L over Mag",
        "monotone lambda sweep",
        "monotone q sweep for ABP-M at eta=0",
    ];
    if std::env::var_os("ACCEPTANCE_SKIP_EXPERIMENT").is_some() {
        for (i, name) in names.into_iter().enumerate() {
            results.push((i + 1, name, outcome(false, "skipped (ACCEPTANCE_SKIP_EXPERIMENT set)")));
        }
    } else {
        let (res, secs) = experiment();
        results.push((1, names[0], criterion_1(&res, secs)));
        results.push((2, names[1], criterion_2(&res)));
        results.push((3, names[2], criterion_3(&res)));
    }
    results.push((4, "top-m truncation guarantees", criterion_4()));
    results.push((5, "sparsity index range", criterion_5()));
    results.push((6, "keep-count consistency by brute force", criterion_6()));
    results.push((7, "LASSO certificates", criterion_7()));
    results.push((8, "backprop vs central differences", criterion_8()));
    results.push((9, "bound evaluator properties", criterion_9()));
    results.push((10, "lossless one-hot pruning", criterion_10()));

    println!();
    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("[{tag}] criterion {id:>2}: {name} -- {}", o.detail);
    }
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
