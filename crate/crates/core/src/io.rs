//! File formats and run configuration: dataset CSV with a JSON sidecar,
//! model and report JSON, flat report CSV, plot data and the key=value
//! configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapt::{Ablation, AdaptConfig, EvalReport, ExperimentConfig, SplitSummary, TaskForecast};
use crate::error::{Error, Result};
use crate::model::{extract_equation, Gates, MetaModel};
use crate::ode_sim::{TimeGrid, Trajectory};
use crate::sindy::SindyGrid;
use crate::systems::{Dataset, EnvironmentSpec, Split, SystemKind, SystemSpec, TaskRecord};
use crate::trainer::{HyperConfig, SweepEntry, SweepGrid, TrainReport};

pub const FORMAT_VERSION: u32 = 1;
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const CLEAN_FILE: &str = "clean.csv";
pub const META_FILE: &str = "meta.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Parse(format!("{}: format_version {found}, expected {FORMAT_VERSION}", path.display())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: usize,
    pub true_params: Vec<f64>,
}

/// JSON sidecar of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub system: SystemKind,
    pub d: usize,
    pub state_names: Vec<String>,
    pub split: Split,
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub prefix_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub retries: usize,
    pub n_tasks: usize,
    pub has_clean: bool,
    pub system_spec: SystemSpec,
    pub environment: EnvironmentSpec,
    /// Fields kept for diagnostics; fitting never reads them.
    pub diagnostics_only: Vec<String>,
    pub tasks: Vec<TaskMeta>,
}

fn write_trajectories(path: &Path, names: &[String], rows: impl Iterator<Item = (usize, Trajectory)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["task_id".to_string(), "t".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (id, traj) in rows {
        for (l, x) in traj.states.iter().enumerate() {
            let mut rec = vec![id.to_string(), fmt_f64(traj.grid.time(l))];
            rec.extend(x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_trajectories(path: &Path, d: usize, grid: &TimeGrid) -> Result<Vec<(usize, Trajectory)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut out: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != d + 2 {
            return Err(Error::Parse(format!("{}: row has {} fields, expected {}", path.display(), rec.len(), d + 2)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("{}: bad number '{s}'", path.display())));
        let id: usize =
            rec[0].parse().map_err(|_| Error::Parse(format!("{}: bad task id '{}'", path.display(), &rec[0])))?;
        let x = (0..d).map(|j| num(&rec[j + 2])).collect::<Result<Vec<f64>>>()?;
        match out.last_mut() {
            Some((last, states)) if *last == id => states.push(x),
            _ => out.push((id, vec![x])),
        }
    }
    out.into_iter()
        .map(|(id, states)| {
            if states.len() != grid.n_points() {
                return Err(Error::Parse(format!(
                    "{}: task {id} has {} rows, expected {}",
                    path.display(),
                    states.len(),
                    grid.n_points()
                )));
            }
            Ok((id, Trajectory::new(*grid, states)?))
        })
        .collect()
}

/// Write `trajectories.csv`, `meta.json` and, for noisy data, `clean.csv`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let names = data.system.kind.state_names();
    let has_clean = data.tasks.iter().any(|t| t.clean.is_some());
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        system: data.system.kind,
        d: data.system.d,
        state_names: names.clone(),
        split: data.environment.split,
        t0: data.grid.t0,
        dt: data.grid.dt,
        n_steps: data.grid.n_steps,
        prefix_len: data.prefix_len,
        noise_sigma: data.noise_sigma,
        seed: data.seed,
        retries: data.retries,
        n_tasks: data.tasks.len(),
        has_clean,
        system_spec: data.system.clone(),
        environment: data.environment.clone(),
        diagnostics_only: vec!["tasks.true_params".into()],
        tasks: data.tasks.iter().map(|t| TaskMeta { task_id: t.task_id, true_params: t.true_params.clone() }).collect(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    write_trajectories(
        &dir.join(TRAJECTORIES_FILE),
        &names,
        data.tasks.iter().map(|t| (t.task_id, t.trajectory.clone())),
    )?;
    let clean_path = dir.join(CLEAN_FILE);
    if has_clean {
        write_trajectories(&clean_path, &names, data.tasks.iter().map(|t| (t.task_id, t.truth().clone())))?;
    } else if clean_path.exists() {
        fs::remove_file(&clean_path).map_err(|e| io_err(&clean_path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta: DatasetMeta = read_json(&meta_path)?;
    check_version(meta.format_version, &meta_path)?;
    let grid = TimeGrid::new(meta.t0, meta.dt, meta.n_steps)?;
    let observed = read_trajectories(&dir.join(TRAJECTORIES_FILE), meta.d, &grid)?;
    let clean = if meta.has_clean { Some(read_trajectories(&dir.join(CLEAN_FILE), meta.d, &grid)?) } else { None };
    if observed.len() != meta.n_tasks || meta.tasks.len() != meta.n_tasks {
        return Err(Error::Parse(format!(
            "{}: {} tasks in csv, {} in metadata",
            dir.display(),
            observed.len(),
            meta.n_tasks
        )));
    }
    let mut tasks = Vec::with_capacity(observed.len());
    for (i, (id, traj)) in observed.into_iter().enumerate() {
        let tm = &meta.tasks[i];
        if tm.task_id != id {
            return Err(Error::Parse(format!("{}: task order differs from metadata", dir.display())));
        }
        let clean_traj = match &clean {
            Some(c) if c.get(i).map(|(cid, _)| *cid) == Some(id) => Some(c[i].1.clone()),
            Some(_) => return Err(Error::Parse(format!("{}: clean trajectories do not match", dir.display()))),
            None => None,
        };
        tasks.push(TaskRecord {
            task_id: id,
            trajectory: traj,
            true_params: tm.true_params.clone(),
            clean: clean_traj,
            environment: meta.environment.clone(),
            noise_sigma: meta.noise_sigma,
        });
    }
    Ok(Dataset {
        system: meta.system_spec,
        environment: meta.environment,
        grid,
        prefix_len: meta.prefix_len,
        noise_sigma: meta.noise_sigma,
        seed: meta.seed,
        retries: meta.retries,
        tasks,
    })
}

/// Model on disk; `gates` and `equation` are derived copies for readers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub gates: Gates,
    pub n_active: usize,
    pub equation: String,
    pub model: MetaModel,
}

pub fn save_model(model: &MetaModel, path: &Path) -> Result<()> {
    let gates = model.gates();
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        n_active: gates.n_active(),
        gates,
        equation: extract_equation(model, None),
        model: model.clone(),
    };
    write_json(path, &file)
}

pub fn load_model(path: &Path) -> Result<MetaModel> {
    let file: ModelFile = read_json(path)?;
    check_version(file.format_version, path)?;
    file.model.validate()?;
    if file.model.gates() != file.gates {
        return Err(Error::Parse(format!("{}: stored gates disagree with the logits", path.display())));
    }
    Ok(file.model)
}

/// Reports of one `eval` or `ablate` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub reports: Vec<EvalReport>,
    pub summary: Vec<SplitSummary>,
}

pub fn save_reports(reports: &[EvalReport], summary: &[SplitSummary], json: &Path, csv_path: &Path) -> Result<()> {
    write_json(
        json,
        &ReportFile { format_version: FORMAT_VERSION, reports: reports.to_vec(), summary: summary.to_vec() },
    )?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| io_err(csv_path, e))?;
    w.write_record(["system", "split", "method", "seed", "task_id", "nrmse", "nan_star"])
        .map_err(|e| io_err(csv_path, e))?;
    for r in reports {
        for t in &r.tasks {
            w.write_record([
                r.system.to_string(),
                r.split.to_string(),
                r.method.clone(),
                r.seed.to_string(),
                t.task_id.to_string(),
                t.nrmse.map(fmt_f64).unwrap_or_default(),
                t.nan_star.to_string(),
            ])
            .map_err(|e| io_err(csv_path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(csv_path, e))
}

pub fn load_reports(path: &Path) -> Result<ReportFile> {
    let file: ReportFile = read_json(path)?;
    check_version(file.format_version, path)?;
    Ok(file)
}

/// Predicted and true held-out trajectories, one row per task, time and series.
pub fn save_forecast_csv(path: &Path, names: &[String], forecasts: &[TaskForecast]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["task_id".to_string(), "t".to_string(), "series".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for f in forecasts {
        let series = [("truth", Some(&f.truth)), ("prediction", f.prediction.as_ref())];
        for (label, traj) in series {
            let Some(traj) = traj else { continue };
            for (l, x) in traj.states.iter().enumerate() {
                let mut rec = vec![f.task_id.to_string(), fmt_f64(traj.grid.time(l)), label.to_string()];
                rec.extend(x.iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec).map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Bar chart of mean NRMSE per split and method, NaN* bars hatched in red.
pub fn summary_svg(summary: &[SplitSummary]) -> String {
    let (w, h, pad) = (120.0 * summary.len().max(1) as f64 + 80.0, 320.0, 40.0);
    let top = summary.iter().filter_map(|s| s.mean).fold(0.0f64, f64::max).max(1e-12);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"16\">mean NRMSE (max {top:.3})</text>\n",
        y0 = h - pad,
        x1 = w - pad / 2.0,
    );
    for (i, s) in summary.iter().enumerate() {
        let x = pad + 10.0 + 120.0 * i as f64;
        let label = format!("{} {}", s.method, s.split);
        match s.mean {
            Some(m) => {
                let bh = (h - 2.0 * pad - 20.0) * m / top;
                out += &format!(
                    "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"90\" height=\"{bh:.1}\" fill=\"steelblue\"/>\n<text x=\"{x:.1}\" y=\"{:.1}\">{m:.3}</text>\n",
                    h - pad - bh,
                    h - pad - bh - 4.0
                );
            }
            None => {
                out += &format!("<text x=\"{x:.1}\" y=\"{:.1}\" fill=\"firebrick\">NaN*</text>\n", h - pad - 4.0);
            }
        }
        out += &format!("<text x=\"{x:.1}\" y=\"{:.1}\">{label}</text>\n", h - pad + 16.0);
    }
    out += "</svg>\n";
    out
}

pub fn save_summary_svg(path: &Path, summary: &[SplitSummary]) -> Result<()> {
    fs::write(path, summary_svg(summary)).map_err(|e| io_err(path, e))
}

/// One line of the training run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub seed: u64,
    pub config: HyperConfig,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
    pub report: Option<TrainReport>,
}

impl RunLogEntry {
    pub fn from_sweep(seed: u64, e: &SweepEntry) -> Self {
        Self { seed, config: e.config.clone(), val_loss: e.val_loss, error: e.error.clone(), report: e.report.clone() }
    }
}

pub fn append_run_log(path: &Path, entries: &[RunLogEntry]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Metaphysica,
    Sindy,
}

/// Everything a CLI run needs, filled from defaults, a config file and
/// command-line overrides in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: SystemKind,
    pub splits: Vec<Split>,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub noise_sigma: Option<f64>,
    pub grid: SweepGrid,
    pub adapt: AdaptConfig,
    pub sindy: SindyGrid,
    pub method: EvalMethod,
    pub ablations: Vec<Ablation>,
    pub val_fraction: f64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Pendulum,
            splits: Split::ALL.to_vec(),
            n_train: 1000,
            n_test: 200,
            seeds: (0..5).collect(),
            noise_sigma: None,
            grid: SweepGrid::default(),
            adapt: AdaptConfig::default(),
            sindy: SindyGrid::default(),
            method: EvalMethod::Metaphysica,
            ablations: Vec::new(),
            val_fraction: 0.2,
            out_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

fn invalid(key: &str, value: &str) -> Error {
    Error::Invalid(format!("bad value '{value}' for '{key}'"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| invalid(key, value))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(invalid(key, value)),
    }
}

/// Snake-case enum variants parsed through their serde names.
fn parse_enum<T: DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    let name = value.trim().to_ascii_lowercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(name)).map_err(|_| invalid(key, value))
}

/// `a..b` or a comma list.
fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    match value.split_once("..") {
        Some((a, b)) => Ok((parse_num::<u64>(key, a)?..parse_num::<u64>(key, b)?).collect()),
        None => parse_list(key, value),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" | "default" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

impl RunConfig {
    /// Apply one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.grid.base;
        let a = &mut self.adapt;
        match key {
            "data.system" => self.system = v.parse()?,
            "data.splits" => self.splits = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "data.n_train" => self.n_train = parse_num(key, v)?,
            "data.n_test" => self.n_test = parse_num(key, v)?,
            "data.seeds" => self.seeds = parse_seeds(key, v)?,
            "data.noise_sigma" => self.noise_sigma = parse_opt(key, v)?,
            "data.val_fraction" => self.val_fraction = parse_num(key, v)?,
            "trainer.lambda_phi" => self.grid.lambda_phi = parse_list(key, v)?,
            "trainer.lambda_rex" => self.grid.lambda_rex = parse_list(key, v)?,
            "trainer.eta" => self.grid.eta = parse_list(key, v)?,
            "trainer.epochs" => t.epochs = parse_num(key, v)?,
            "trainer.batch_tasks" => t.batch_tasks = parse_num(key, v)?,
            "trainer.optimizer" => t.optimizer = parse_enum(key, v)?,
            "trainer.l1_routing" => t.l1_routing = parse_enum(key, v)?,
            "trainer.vrex_scope" => t.vrex_scope = parse_enum(key, v)?,
            "trainer.logit_init" => t.logit_init = parse_num(key, v)?,
            "trainer.smooth_derivatives" => t.smooth_derivatives = parse_bool(key, v)?,
            "trainer.normalize" => t.normalize = parse_bool(key, v)?,
            "trainer.train_gates" => t.train_gates = parse_bool(key, v)?,
            "trainer.train_xi" => t.train_xi = parse_bool(key, v)?,
            "trainer.xi_refine_iters" => t.xi_refine_iters = parse_num(key, v)?,
            "adapt.steps" => a.steps = parse_num(key, v)?,
            "adapt.eta" => a.eta = parse_num(key, v)?,
            "adapt.warm_start" => a.warm_start = parse_enum(key, v)?,
            "adapt.refine_with_rollout" => a.refine_with_rollout = parse_bool(key, v)?,
            "adapt.rollout_unroll_horizon" => a.rollout_unroll_horizon = parse_opt(key, v)?,
            "adapt.method" => a.method = parse_enum(key, v)?,
            "adapt.standardize" => a.standardize = parse_bool(key, v)?,
            "adapt.smooth_derivatives" => a.smooth_derivatives = parse_bool(key, v)?,
            "adapt.fit_initial_state" => a.fit_initial_state = parse_bool(key, v)?,
            "adapt.population_start" => a.population_start = parse_bool(key, v)?,
            "adapt.prior_weight" => a.prior_weight = parse_num(key, v)?,
            "adapt.n_sub" => a.guard.n_sub = parse_num(key, v)?,
            "adapt.max_norm" => a.guard.max_norm = parse_num(key, v)?,
            "sindy.thresholds" => self.sindy.thresholds = parse_list(key, v)?,
            "sindy.alphas" => self.sindy.alphas = parse_list(key, v)?,
            "sindy.max_iters" => self.sindy.max_iters = parse_num(key, v)?,
            "eval.method" => self.method = parse_enum(key, v)?,
            "eval.ablations" => {
                self.ablations =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?
            }
            "output.dir" => self.out_dir = PathBuf::from(v),
            "run.threads" => self.threads = parse_opt(key, v)?,
            _ => return Err(Error::Invalid(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Parse `[section]` blocks of `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut settings = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                settings.insert(key, v.to_string());
            }
        }
        for (k, v) in &settings {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.grid.configs() {
            c.validate()?;
        }
        if self.seeds.is_empty() || self.splits.is_empty() {
            return Err(Error::Invalid("at least one seed and one split are required".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::OutOfRange(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if matches!(self.noise_sigma, Some(s) if !(s >= 0.0 && s.is_finite())) {
            return Err(Error::OutOfRange("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            system: self.system,
            splits: self.splits.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
            seeds: self.seeds.clone(),
            grid: self.grid.clone(),
            adapt: self.adapt.clone(),
            val_fraction: self.val_fraction,
            noise_sigma: self.noise_sigma,
        }
    }
}
