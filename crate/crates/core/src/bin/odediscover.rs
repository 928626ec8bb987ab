use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odediscover::adapt::{default_library, evaluate, run_ablation, summarize, Ablation, Method};
use odediscover::error::Error;
use odediscover::io::{
    append_run_log, load_dataset, load_model, load_reports, save_dataset, save_forecast_csv, save_model, save_reports,
    save_summary_svg, EvalMethod, RunConfig, RunLogEntry,
};
use odediscover::model::extract_equation;
use odediscover::systems::{generate, Split, SystemKind};
use odediscover::trainer::{select_from, sweep_all, SweepGrid};

#[derive(Parser)]
#[command(name = "odediscover", version, about = "Meta-learned ODE discovery and forecasting")]
struct Cli {
    /// Configuration file with [section] key = value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set trainer.epochs=500.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (also read from ODEDISCOVER_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset.
    Gen(GenArgs),
    /// Fit one hyperparameter configuration.
    Train(TrainArgs),
    /// Fit the whole grid and keep the selected model.
    Sweep(TrainArgs),
    /// Adapt to every test task, forecast and score.
    Eval(EvalArgs),
    /// Run one ablation end to end over the configured seeds and splits.
    Ablate(AblateArgs),
    /// Print the recovered equations of a model.
    Equation(EquationArgs),
    /// Render a summary chart from a report file.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    system: SystemKind,
    #[arg(long, default_value = "id")]
    split: Split,
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative observation noise; defaults to the system's value.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory; the last tasks are held out for validation.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lambda_phi: Option<f64>,
    #[arg(long)]
    lambda_rex: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Append per-configuration training reports to this JSON-lines file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file written by train or sweep.
    #[arg(long)]
    model: PathBuf,
    /// Test dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json, report.csv, forecasts.csv and summary.svg.
    #[arg(long)]
    out: PathBuf,
    /// metaphysica, sindy or no-adapt; defaults to the configured method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    variant: Ablation,
    #[arg(long)]
    system: Option<SystemKind>,
    /// Seed range `a..b` or list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EquationArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status 2 for bad input, 1 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) | Error::OutOfRange(_) | Error::UnknownSystem(_) | Error::Parse(_) => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> odediscover::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Invalid(format!("override '{o}' is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cli: &Cli, cfg: &RunConfig) -> odediscover::Result<()> {
    let env = std::env::var("ODEDISCOVER_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = cli.threads.or(env).or(cfg.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> odediscover::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn cmd_gen(args: &GenArgs) -> odediscover::Result<()> {
    let k = args.system;
    let noise = args.noise.unwrap_or_else(|| k.default_noise());
    let data = generate(&k.spec(), &k.environment(args.split), args.tasks, &k.default_grid(), noise, args.seed)?;
    if data.retries > 0 {
        eprintln!("warning: {} diverging simulations were redrawn", data.retries);
    }
    save_dataset(&data, &args.out)?;
    println!("wrote {} tasks to {}", data.tasks.len(), args.out.display());
    Ok(())
}

fn cmd_fit(args: &TrainArgs, cfg: &RunConfig, full_grid: bool) -> odediscover::Result<()> {
    let data = load_dataset(&args.data)?;
    let (train, val) = data.split_validation(cfg.val_fraction);
    let mut base = cfg.grid.base.clone();
    if let Some(e) = args.epochs {
        base.epochs = e;
    }
    let grid = if full_grid {
        SweepGrid { base, ..cfg.grid.clone() }
    } else {
        base.lambda_phi = args.lambda_phi.unwrap_or(base.lambda_phi);
        base.lambda_rex = args.lambda_rex.unwrap_or(base.lambda_rex);
        base.eta = args.eta.unwrap_or(base.eta);
        SweepGrid::single(base)
    };
    let (entries, models) = sweep_all(&train, &val, &default_library(data.system.kind), &grid, args.seed)?;
    for e in &entries {
        if let Some(err) = &e.error {
            eprintln!(
                "warning: config lambda_phi={} lambda_rex={} eta={} failed: {err}",
                e.config.lambda_phi, e.config.lambda_rex, e.config.eta
            );
        }
    }
    if let Some(log) = &args.log {
        ensure_parent(log)?;
        let lines: Vec<RunLogEntry> = entries.iter().map(|e| RunLogEntry::from_sweep(args.seed, e)).collect();
        append_run_log(log, &lines)?;
    }
    let (model, _) = select_from(entries, models)?;
    ensure_parent(&args.out)?;
    save_model(&model, &args.out)?;
    println!("{}", extract_equation(&model, None));
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> odediscover::Result<()> {
    let model = load_model(&args.model)?;
    let data = load_dataset(&args.data)?;
    let method = match args.method.as_deref() {
        None => match cfg.method {
            EvalMethod::Metaphysica => Method::Adapt(cfg.adapt.clone()),
            EvalMethod::Sindy => Method::Sindy(cfg.sindy.clone()),
        },
        Some(m) => match m.to_ascii_lowercase().replace('_', "-").as_str() {
            "metaphysica" => Method::Adapt(cfg.adapt.clone()),
            "sindy" => Method::Sindy(cfg.sindy.clone()),
            "no-adapt" => Method::MeanTrainWeights,
            other => return Err(Error::Invalid(format!("unknown method '{other}'"))),
        },
    };
    let (report, forecasts) = evaluate(&model, &data, &method, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    let reports = vec![report];
    let summary = summarize(&reports);
    save_reports(&reports, &summary, &args.out.join("report.json"), &args.out.join("report.csv"))?;
    save_forecast_csv(&args.out.join("forecasts.csv"), &data.system.kind.state_names(), &forecasts)?;
    save_summary_svg(&args.out.join("summary.svg"), &summary)?;
    let r = &reports[0];
    match (r.empty, r.mean) {
        (true, _) => println!("empty test set"),
        (false, Some(m)) => {
            println!("mean NRMSE {m:.4} over {} tasks, {} NaN*", r.tasks.len() - r.nan_star_count, r.nan_star_count)
        }
        (false, None) => println!("all {} tasks NaN*", r.nan_star_count),
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, cfg: &mut RunConfig) -> odediscover::Result<()> {
    if let Some(s) = args.system {
        cfg.system = s;
    }
    if let Some(s) = &args.seeds {
        cfg.set("data.seeds", s)?;
    }
    let reports = run_ablation(&cfg.experiment(), args.variant)?;
    let summary = summarize(&reports);
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    save_reports(&reports, &summary, &args.out.join("report.json"), &args.out.join("report.csv"))?;
    save_summary_svg(&args.out.join("summary.svg"), &summary)?;
    for s in &summary {
        match s.mean {
            Some(m) => println!("{} {}: {m:.4} ± {:.4}", s.method, s.split, s.std.unwrap_or(0.0)),
            None => println!("{} {}: NaN*", s.method, s.split),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> odediscover::Result<()> {
    let mut cfg = load_config(&cli)?;
    init_threads(&cli, &cfg)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_fit(a, &cfg, false),
        Command::Sweep(a) => cmd_fit(a, &cfg, true),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Ablate(a) => cmd_ablate(a, &mut cfg),
        Command::Equation(a) => {
            println!("{}", extract_equation(&load_model(&a.model)?, None));
            Ok(())
        }
        Command::Plot(a) => {
            let file = load_reports(&a.report)?;
            ensure_parent(&a.out)?;
            save_summary_svg(&a.out, &file.summary)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
