//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 1 to 6 run the full pipeline (1000 training tasks, the full
//! 36-point grid at 2000 epochs, five seeds) for the pendulum,
//! predator-prey and SIR systems, which takes hours on one core. Set
//! `ACCEPTANCE_CRITERIA=7,8` to run a subset while iterating.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odediscover::adapt::{
    default_library, evaluate, nrmse, Ablation, AdaptConfig, EvalReport, ExperimentConfig, Method, SeedSweep,
};
use odediscover::basis::{BasisKind, BasisLibrary};
use odediscover::equation::{eval_system, parse_system};
use odediscover::model::{extract_equation, predict_derivative, Gates, MetaModel, TaskWeights};
use odediscover::ode_sim::{integrate, DivergenceGuard, FnField, TimeGrid, Trajectory};
use odediscover::sindy::{sindy_forecast_selected, stls_fit, SindyGrid, StlsConfig};
use odediscover::systems::{generate, split_prefix, Split, SystemKind};
use odediscover::trainer::{total_loss, total_loss_relaxed, vrex_penalty, HyperConfig, SweepGrid, TaskRisk};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(id: &str, pass: bool, detail: &str) -> bool {
    let mut out = std::io::stdout();
    writeln!(out, "criterion {id}: {} ({detail})", if pass { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
    pass
}

fn progress(msg: &str) {
    let mut err = std::io::stderr();
    writeln!(err, "  .. {msg}").unwrap();
}

fn selected(id: &str) -> bool {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) => list.split(',').any(|s| s.trim() == id),
        Err(_) => true,
    }
}

/// Index of the first dictionary function satisfying `pred`.
fn find(lib: &BasisLibrary, pred: impl Fn(&BasisKind) -> bool) -> usize {
    lib.functions.iter().position(pred).expect("term present in the dictionary")
}

fn lin(lib: &BasisLibrary, j: usize) -> usize {
    find(lib, |f| *f == BasisKind::Linear { j })
}

fn quad(lib: &BasisLibrary, a: usize, b: usize) -> usize {
    let (j, l) = (a.min(b), a.max(b));
    find(lib, |f| *f == BasisKind::Quadratic { j, l })
}

fn sine(lib: &BasisLibrary, j: usize) -> usize {
    find(lib, |f| matches!(f, BasisKind::Sine { j: s, .. } if *s == j))
}

fn support_of(model: &MetaModel) -> Vec<BTreeSet<usize>> {
    let g = model.gates();
    (0..model.d()).map(|j| g.support(j).into_iter().collect()).collect()
}

fn sets(rows: &[&[usize]]) -> Vec<BTreeSet<usize>> {
    rows.iter().map(|r| r.iter().copied().collect()).collect()
}

/// Accepted gate supports of each system.
fn expected_supports(kind: SystemKind) -> Vec<Vec<BTreeSet<usize>>> {
    let lib = BasisLibrary::standard(kind.dim());
    match kind {
        SystemKind::Pendulum => vec![sets(&[&[lin(&lib, 1)], &[sine(&lib, 0), lin(&lib, 1)]])],
        SystemKind::PredatorPrey => {
            let (p, q, pq) = (lin(&lib, 0), lin(&lib, 1), quad(&lib, 0, 1));
            vec![sets(&[&[p, pq], &[pq, q]])]
        }
        SystemKind::Sir => {
            let (i, si, ii, ir) = (lin(&lib, 1), quad(&lib, 0, 1), quad(&lib, 1, 1), quad(&lib, 1, 2));
            vec![sets(&[&[si], &[si, i], &[i]]), sets(&[&[si], &[si, ii, ir], &[si, ii, ir]])]
        }
        SystemKind::ComplexOde => Vec::new(),
    }
}

/// Everything computed for one seed of one system.
struct SeedResult {
    seed: u64,
    equation: String,
    structure_ok: bool,
    ood_x0: EvalReport,
    ood_x0_w: Option<EvalReport>,
    no_adapt: Option<EvalReport>,
    no_vrex: Option<EvalReport>,
    no_l1: Option<EvalReport>,
    sindy: Option<EvalReport>,
}

fn run_seed(kind: SystemKind, seed: u64) -> SeedResult {
    let cfg = ExperimentConfig::new(kind);
    let start = Instant::now();
    let sweep = SeedSweep::run(&cfg, seed, &cfg.grid).expect("sweep runs");
    let model = sweep.select_all().expect("a configuration succeeds");
    let structure_ok = expected_supports(kind).contains(&support_of(&model));
    let equation = extract_equation(&model, None);
    progress(&format!("{kind} seed {seed}: sweep {:.0}s, {equation}", start.elapsed().as_secs_f64()));
    let adapt = Method::Adapt(AdaptConfig::default());
    let test = cfg.test_data(seed, Split::OodX0).expect("test data");
    let ood_x0 = evaluate(&model, &test, &adapt, seed).expect("evaluation").0;
    let mut r = SeedResult {
        seed,
        equation,
        structure_ok,
        ood_x0,
        ood_x0_w: None,
        no_adapt: None,
        no_vrex: None,
        no_l1: None,
        sindy: None,
    };
    if kind == SystemKind::Pendulum {
        let test_w = cfg.test_data(seed, Split::OodX0W).expect("test data");
        r.ood_x0_w = Some(evaluate(&model, &test_w, &adapt, seed).expect("evaluation").0);
        r.no_adapt = Some(evaluate(&model, &test, &Method::MeanTrainWeights, seed).expect("evaluation").0);
        let no_vrex = sweep.select_ablation(Ablation::NoVrex).expect("a configuration succeeds");
        r.no_vrex = Some(evaluate(&no_vrex, &test, &adapt, seed).expect("evaluation").0);
        let l1_grid = Ablation::NoL1.grid(&cfg.grid);
        r.no_l1 = match SeedSweep::run(&cfg, seed, &l1_grid).and_then(|s| s.select_all()) {
            Ok(m) => Some(evaluate(&m, &test, &adapt, seed).expect("evaluation").0),
            Err(e) => {
                progress(&format!("no_l1 seed {seed}: {e}"));
                None
            }
        };
        r.sindy = Some(evaluate(&model, &test, &Method::Sindy(SindyGrid::default()), seed).expect("evaluation").0);
    }
    progress(&format!(
        "{kind} seed {seed}: ood-x0 mean {:?} NaN* {} (total {:.0}s)",
        r.ood_x0.mean,
        r.ood_x0.nan_star_count,
        start.elapsed().as_secs_f64()
    ));
    r
}

struct Lab {
    runs: Vec<(SystemKind, Vec<SeedResult>)>,
}

impl Lab {
    fn system(&mut self, kind: SystemKind) -> &[SeedResult] {
        if !self.runs.iter().any(|(k, _)| *k == kind) {
            let results = SEEDS.iter().map(|&s| run_seed(kind, s)).collect();
            self.runs.push((kind, results));
        }
        &self.runs.iter().find(|(k, _)| *k == kind).expect("just inserted").1
    }
}

/// Mean over seeds of per-seed means, with the total NaN* count. `None`
/// when some seed has no scored task.
fn seed_mean<'a>(reports: impl Iterator<Item = &'a EvalReport>) -> (Option<f64>, usize) {
    let mut means = Vec::new();
    let mut nan = 0;
    let mut missing = false;
    for r in reports {
        nan += r.nan_star_count;
        match r.mean {
            Some(m) => means.push(m),
            None => missing = true,
        }
    }
    let mean = (!missing && !means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
    (mean, nan)
}

fn structure_criterion(id: &str, lab: &mut Lab, kind: SystemKind) -> bool {
    let runs = lab.system(kind);
    let hits = runs.iter().filter(|r| r.structure_ok).count();
    let misses: Vec<String> =
        runs.iter().filter(|r| !r.structure_ok).map(|r| format!("seed {}: {}", r.seed, r.equation)).collect();
    let mut detail = format!("{kind}: exact support in {hits}/5 seeds");
    if !misses.is_empty() {
        detail += &format!("; {}", misses.join("; "));
    }
    line(id, hits >= 4, &detail)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NaN*".to_string(), |m| format!("{m:.4}"))
}

fn criterion_4(lab: &mut Lab) -> bool {
    let mut rows = Vec::new();
    let mut all = true;
    let checks: [(SystemKind, bool, f64); 4] = [
        (SystemKind::Pendulum, false, 0.21),
        (SystemKind::Sir, false, 0.06),
        (SystemKind::PredatorPrey, false, 0.39),
        (SystemKind::Pendulum, true, 0.54),
    ];
    for (kind, with_w, bound) in checks {
        let runs = lab.system(kind);
        let (mean, nan) = if with_w {
            seed_mean(runs.iter().filter_map(|r| r.ood_x0_w.as_ref()))
        } else {
            seed_mean(runs.iter().map(|r| &r.ood_x0))
        };
        let ok = nan == 0 && mean.is_some_and(|m| m <= bound);
        all &= ok;
        let split = if with_w { "ood-x0-w" } else { "ood-x0" };
        rows.push(format!("{kind} {split} {} <= {bound} NaN* {nan}", fmt_opt(mean)));
    }
    line("4", all, &rows.join("; "))
}

fn criterion_5(lab: &mut Lab) -> bool {
    let runs = lab.system(SystemKind::Pendulum);
    let (full, _) = seed_mean(runs.iter().map(|r| &r.ood_x0));
    let (no_adapt, na_nan) = seed_mean(runs.iter().filter_map(|r| r.no_adapt.as_ref()));
    let (no_vrex, nv_nan) = seed_mean(runs.iter().filter_map(|r| r.no_vrex.as_ref()));
    let l1_failed = runs.iter().any(|r| r.no_l1.as_ref().map_or(true, |rep| rep.nan_star_count > 0));
    let (no_l1, l1_nan) = seed_mean(runs.iter().filter_map(|r| r.no_l1.as_ref()));
    let Some(full) = full else {
        return line("5", false, "full method has no finite mean");
    };
    // a method with no scored task is worse than any finite mean
    let adapt_ok = no_adapt.map_or(true, |m| m >= 5.0 * full);
    let vrex_ok = nv_nan == 0 && no_vrex.is_some_and(|m| m <= 2.0 * full);
    let l1_ok = l1_failed || no_l1.is_some_and(|m| m >= 10.0 * full);
    let detail = format!(
        "full {full:.4}; no_adapt {} (NaN* {na_nan}, need >= {:.4}); no_vrex {} (NaN* {nv_nan}, need <= {:.4}); no_l1 {} (NaN* {l1_nan}, need NaN* or >= {:.4})",
        fmt_opt(no_adapt),
        5.0 * full,
        fmt_opt(no_vrex),
        2.0 * full,
        fmt_opt(no_l1),
        10.0 * full
    );
    line("5", adapt_ok && vrex_ok && l1_ok, &detail)
}

fn criterion_6(lab: &mut Lab) -> bool {
    let runs = lab.system(SystemKind::Pendulum);
    let tasks: Vec<_> = runs.iter().filter_map(|r| r.sindy.as_ref()).flat_map(|r| r.tasks.iter()).collect();
    let bad = tasks.iter().filter(|t| t.nrmse.map_or(true, |v| v > 0.5)).count();
    let frac = bad as f64 / tasks.len().max(1) as f64;
    let noisy_ok = !tasks.is_empty() && frac >= 0.5;

    // sanity regime: noise-free trajectories, fit on 100 steps, forecast 100 more
    let k = SystemKind::Pendulum;
    let long = TimeGrid::new(0.0, 0.1, 200).unwrap();
    let clean = generate(&k.spec(), &k.environment(Split::OodX0), 20, &long, 0.0, 606).unwrap();
    let lib = BasisLibrary::standard(2);
    let errs: Vec<Option<f64>> = clean
        .tasks
        .iter()
        .map(|t| {
            let (prefix, held) = split_prefix(&t.trajectory, 100).unwrap();
            let f = sindy_forecast_selected(&prefix, &long.shifted(100, 100), &lib, &SindyGrid::default()).ok()?;
            let pred = Trajectory { grid: held.grid, states: f.states[1..].to_vec() };
            nrmse(&pred, &held).ok()
        })
        .collect();
    let scored: Vec<f64> = errs.iter().flatten().copied().collect();
    let clean_mean = (scored.len() == errs.len()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    let clean_ok = clean_mean.is_some_and(|m| m < 0.05);
    let detail = format!(
        "noisy pendulum ood-x0: {bad}/{} tasks NaN* or > 0.5 ({:.0}%, need >= 50%); clean long prefix mean {} (need < 0.05)",
        tasks.len(),
        100.0 * frac,
        fmt_opt(clean_mean)
    );
    line("6", noisy_ok && clean_ok, &detail)
}

fn fd5(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn sigmoid_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 - s)
}

fn criterion_7() -> bool {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;

    // RK4 global error ratio on x' = -x over [0, 1]
    let field = FnField::new(1, |x: &[f64], o: &mut [f64]| o[0] = -x[0]);
    let err = |n: usize| {
        let grid = TimeGrid::new(0.0, 1.0 / n as f64, n).unwrap();
        let t = integrate(&field, &[1.0], &grid, &DivergenceGuard { max_norm: 1e8, n_sub: 1 }).unwrap();
        (t.last()[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(10) / err(20);
    ok &= (12.0..=20.0).contains(&ratio);
    parts.push(format!("rk4 ratio {ratio:.2}"));

    // analytic gradients against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let k = SystemKind::Pendulum;
    let data = generate(&k.spec(), &k.environment(Split::Id), 3, &k.default_grid(), 0.01, 70).unwrap();
    let trajs = data.observations();
    let lib = BasisLibrary::standard(2);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut model = MetaModel::new(lib.clone(), k.state_names(), 0.0);
        for l in model.gate_logits.0.iter_mut().flatten() {
            let mag = rng.gen_range(1e-3..2.0);
            *l = if rng.gen_bool(0.6) { mag } else { -mag };
        }
        for v in model.xi.0.iter_mut() {
            *v = rng.gen_range(-1.2..1.2);
        }
        let w: Vec<TaskWeights> = (0..3)
            .map(|_| TaskWeights((0..2).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()))
            .collect();
        let cfg = HyperConfig {
            lambda_phi: rng.gen_range(0.0..1e-2),
            lambda_rex: rng.gen_range(0.0..1.0),
            ..HyperConfig::default()
        };
        let (_, g) = total_loss(&model, &w, &trajs, &cfg).unwrap();
        let f = |m: &MetaModel, w: &[TaskWeights]| total_loss(m, w, &trajs, &cfg).unwrap().0.total;
        for t in 0..3 {
            for j in 0..2 {
                for c in 0..8 {
                    let fd = fd5(
                        |e| {
                            let mut v = w.clone();
                            v[t].0[j][c] += e;
                            f(&model, &v)
                        },
                        h,
                    );
                    if g.weights[t].0[j][c] != 0.0 || fd.abs() > 1e-9 {
                        worst = worst.max(rel_err(g.weights[t].0[j][c], fd));
                    }
                }
            }
        }
        for s in 0..lib.n_xi {
            let fd = fd5(
                |e| {
                    let mut m = model.clone();
                    m.xi.0[s] += e;
                    f(&m, &w)
                },
                h,
            );
            worst = worst.max(rel_err(g.xi[s], fd));
        }
        let g0: Vec<Vec<f64>> =
            model.gates().0.iter().map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).collect();
        for j in 0..2 {
            for c in 0..8 {
                let fd = fd5(
                    |e| {
                        let mut gv = g0.clone();
                        gv[j][c] += e;
                        total_loss_relaxed(&model, &gv, &w, &trajs, &cfg).unwrap().0.total
                    },
                    h,
                );
                worst = worst.max(rel_err(g.gates[j][c], fd * sigmoid_prime(model.gate_logits.0[j][c])));
            }
        }
    }
    ok &= worst < 1e-4;
    parts.push(format!("gradient worst rel err {worst:.1e}"));

    // V-REx on equal risks
    let equal: Vec<TaskRisk> = (0..7).map(|i| TaskRisk { task_id: i, value: 0.37 }).collect();
    let v = vrex_penalty(&equal);
    ok &= v == 0.0;
    parts.push(format!("vrex(equal) {v}"));

    // NRMSE of the per-dimension mean predictor
    let grid = TimeGrid::new(0.0, 0.1, 66).unwrap();
    let truth =
        Trajectory::new(grid, (0..67).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(10.0..500.0)]).collect())
            .unwrap();
    let means: Vec<f64> = (0..2).map(|j| truth.column(j).iter().sum::<f64>() / 67.0).collect();
    let n = nrmse(&Trajectory::new(grid, vec![means; 67]).unwrap(), &truth).unwrap();
    ok &= (n - 1.0).abs() <= 1e-9;
    parts.push(format!("nrmse(mean) {n:.12}"));

    // STLS without threshold or ridge against the normal equations
    let mut stls_worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let c = stls_fit(&x, &y, &StlsConfig { threshold: 0.0, alpha: 0.0, max_iters: 20 }).unwrap();
        let a = DMatrix::from_fn(60, 6, |r, k| x[r][k]);
        for j in 0..2 {
            let b = DVector::from_fn(60, |r, _| y[r][j]);
            let oracle = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * b));
            for k in 0..6 {
                stls_worst = stls_worst.max((c[j][k] - oracle[k]).abs());
            }
        }
    }
    ok &= stls_worst <= 1e-8;
    parts.push(format!("stls vs oracle {stls_worst:.1e}"));

    // numeric equation text evaluates like the model
    let mut eq_worst: f64 = 0.0;
    for kind in [SystemKind::Pendulum, SystemKind::Sir, SystemKind::ComplexOde] {
        let lib = default_library(kind);
        let gates = Gates((0..lib.d).map(|_| (0..lib.m()).map(|_| rng.gen_bool(0.5)).collect()).collect());
        let mut model = MetaModel::with_gates(lib.clone(), kind.state_names(), &gates);
        for v in model.xi.0.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let w = TaskWeights((0..lib.d).map(|_| (0..lib.m()).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect());
        let eqs = parse_system(&extract_equation(&model, Some(&w))).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..lib.d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let a = predict_derivative(&model, &w, &x);
            let b = eval_system(&eqs, &model.state_names, &x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                eq_worst = eq_worst.max((p - q).abs() / p.abs().max(1.0));
            }
        }
    }
    ok &= eq_worst <= 1e-12;
    parts.push(format!("equation round trip {eq_worst:.1e}"));

    // SIR population is conserved
    let k = SystemKind::Sir;
    let sir = generate(&k.spec(), &k.environment(Split::OodX0), 20, &k.default_grid(), 0.0, 71).unwrap();
    let mut drift: f64 = 0.0;
    for t in &sir.tasks {
        let n0: f64 = t.trajectory.states[0].iter().sum();
        for s in &t.trajectory.states {
            drift = drift.max((s.iter().sum::<f64>() - n0).abs() / n0);
        }
    }
    ok &= drift < 1e-6;
    parts.push(format!("SIR drift {drift:.1e}"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    parts.push(format!("{secs:.1}s"));
    line("7", ok, &parts.join("; "))
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_odediscover")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn criterion_8() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let fast = [
        "--set",
        "trainer.epochs=20",
        "--set",
        "trainer.lambda_phi=0.001,0.01",
        "--set",
        "trainer.lambda_rex=0,0.01",
        "--set",
        "trainer.eta=0.01",
    ];
    let run = |root: &Path| -> bool {
        let s = |p: &str| root.join(p).to_str().unwrap().to_string();
        let mut ok = cli(&["gen", "--system", "predator_prey", "--tasks", "40", "--seed", "8", "--out", &s("train")]);
        ok &= cli(&["gen", "--system", "pendulum", "--tasks", "40", "--seed", "8", "--out", &s("ptrain")]);
        ok &= cli(&[
            "gen",
            "--system",
            "pendulum",
            "--split",
            "ood-x0",
            "--tasks",
            "8",
            "--seed",
            "9",
            "--out",
            &s("test"),
        ]);
        let mut sweep = fast.to_vec();
        let (ptrain, model, log) = (s("ptrain"), s("model.json"), s("run.jsonl"));
        sweep.extend(["sweep", "--data", &ptrain, "--out", &model, "--seed", "3", "--log", &log]);
        ok &= cli(&sweep);
        let (test, eval, sindy) = (s("test"), s("eval"), s("sindy"));
        ok &= cli(&["eval", "--model", &model, "--data", &test, "--out", &eval, "--seed", "3"]);
        ok &= cli(&["eval", "--model", &model, "--data", &test, "--out", &sindy, "--method", "sindy"]);
        let mut ablate = fast.to_vec();
        let abl = s("ablate");
        ablate.extend([
            "--set",
            "data.n_train=30",
            "--set",
            "data.n_test=5",
            "--set",
            "data.splits=ood-x0",
            "ablate",
            "--variant",
            "no-vrex",
            "--seeds",
            "0..2",
            "--out",
            &abl,
        ]);
        ok &= cli(&ablate);
        ok
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !run(&a) || !run(&b) {
        return line("8", false, "a command failed");
    }
    let files = [
        "train/trajectories.csv",
        "train/meta.json",
        "ptrain/trajectories.csv",
        "ptrain/clean.csv",
        "ptrain/meta.json",
        "test/trajectories.csv",
        "test/meta.json",
        "model.json",
        "eval/report.json",
        "eval/report.csv",
        "eval/forecasts.csv",
        "eval/summary.svg",
        "sindy/report.json",
        "sindy/forecasts.csv",
        "ablate/report.json",
        "ablate/report.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() || !a.join(f).exists())
        .collect();
    let strip = |root: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(root.join("run.jsonl"))
            .unwrap_or_default()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["report"]["wall_time_s"] = serde_json::Value::Null;
                v
            })
            .collect()
    };
    let log_same = strip(&a) == strip(&b) && !strip(&a).is_empty();
    let detail = if differing.is_empty() && log_same {
        format!("{} files and the run log (timing removed) identical across two runs", files.len())
    } else {
        format!("differing: {differing:?}, run log identical: {log_same}")
    };
    line("8", differing.is_empty() && log_same, &detail)
}

/// Exploratory: composed dictionary and one training configuration.
fn complex_ode() -> bool {
    let lib = default_library(SystemKind::ComplexOde);
    let q2 = quad(&lib, 1, 1);
    let k = find(&lib, |f| matches!(f, BasisKind::SineOf { inner, .. } if *inner == q2));
    let xi = lib.default_xi();
    let representable = [(0.3, -1.2), (1.1, 0.7), (-0.4, 1.9)]
        .iter()
        .all(|&(p, q): &(f64, f64)| (lib.eval(&xi, &[p, q])[k] - (q * q).sin()).abs() < 1e-12);
    let mut cfg = ExperimentConfig::new(SystemKind::ComplexOde);
    cfg.grid =
        SweepGrid::single(HyperConfig { lambda_phi: 5e-3, lambda_rex: 1e-3, eta: 1e-2, ..HyperConfig::default() });
    let start = Instant::now();
    let outcome = SeedSweep::run(&cfg, 0, &cfg.grid).and_then(|s| s.select_all()).and_then(|m| {
        let test = cfg.test_data(0, Split::OodX0)?;
        Ok((extract_equation(&m, None), evaluate(&m, &test, &Method::Adapt(AdaptConfig::default()), 0)?.0))
    });
    let (clean, detail) = match outcome {
        Ok((eq, r)) => (
            true,
            format!(
                "completed in {:.0}s, ood-x0 mean {} with {}/{} NaN* tasks; {eq}",
                start.elapsed().as_secs_f64(),
                fmt_opt(r.mean),
                r.nan_star_count,
                r.tasks.len()
            ),
        ),
        Err(e) => (
            matches!(
                e,
                odediscover::Error::Diverged { .. }
                    | odediscover::Error::AllConfigsFailed
                    | odediscover::Error::SimulationDiverged { .. }
            ),
            format!("reported {e}"),
        ),
    };
    line(
        "complex-ode (exploratory)",
        representable && clean,
        &format!("sin(q²) representable: {representable}; {detail}"),
    )
}

fn main() {
    let mut lab = Lab { runs: Vec::new() };
    let mut results = Vec::new();
    if selected("7") {
        results.push(criterion_7());
    }
    if selected("8") {
        results.push(criterion_8());
    }
    if selected("1") {
        results.push(structure_criterion("1", &mut lab, SystemKind::Pendulum));
    }
    if selected("2") {
        results.push(structure_criterion("2", &mut lab, SystemKind::PredatorPrey));
    }
    if selected("3") {
        results.push(structure_criterion("3", &mut lab, SystemKind::Sir));
    }
    if selected("4") {
        results.push(criterion_4(&mut lab));
    }
    if selected("5") {
        results.push(criterion_5(&mut lab));
    }
    if selected("6") {
        results.push(criterion_6(&mut lab));
    }
    if selected("complex") {
        results.push(complex_ode());
    }
    let failed = results.iter().filter(|r| !**r).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
