//! Benchmark dynamical systems and task generation.
//!
//! Each task draws its own initial state and parameters from an environment,
//! is simulated on the shared grid, and optionally receives additive Gaussian
//! measurement noise. Every task uses its own ChaCha8 stream keyed by the
//! task index, so task `i` is identical regardless of how many tasks are
//! generated.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode_sim::{integrate, DivergenceGuard, TimeGrid, Trajectory, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    PredatorPrey,
    Sir,
    ComplexOde,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] =
        [SystemKind::Pendulum, SystemKind::PredatorPrey, SystemKind::Sir, SystemKind::ComplexOde];

    pub fn dim(self) -> usize {
        match self {
            SystemKind::Sir => 3,
            _ => 2,
        }
    }

    pub fn state_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            SystemKind::Pendulum => &["θ", "ω"],
            SystemKind::PredatorPrey | SystemKind::ComplexOde => &["p", "q"],
            SystemKind::Sir => &["S", "I", "R"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Pendulum => &["alpha", "rho"],
            SystemKind::PredatorPrey => &["alpha", "beta", "gamma", "delta"],
            SystemKind::Sir => &["beta", "gamma"],
            SystemKind::ComplexOde => &["a", "b", "c"],
        }
    }

    /// Base parameter vector; task parameters are drawn as multiples of it.
    pub fn param_base(self) -> Vec<f64> {
        match self {
            SystemKind::Pendulum => vec![1.0, 0.2],
            SystemKind::PredatorPrey => vec![1.0, 0.06, 0.5, 0.0005],
            SystemKind::Sir => vec![4.0, 0.4],
            SystemKind::ComplexOde => vec![1.0, 1.0, 1.0],
        }
    }

    /// Observed prefix length (index `t_r`) on the default 100-step grid.
    pub fn default_prefix_len(self) -> usize {
        match self {
            SystemKind::Sir => 10,
            _ => 33,
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            SystemKind::Pendulum => 0.01,
            _ => 0.0,
        }
    }

    pub fn default_grid(self) -> TimeGrid {
        TimeGrid { t0: 0.0, dt: 0.1, n_steps: 100 }
    }

    pub fn spec(self) -> SystemSpec {
        SystemSpec { kind: self, d: self.dim(), param_base: self.param_base() }
    }

    pub fn environment(self, split: Split) -> EnvironmentSpec {
        let ood = split != Split::Id;
        let x0_ranges = match self {
            SystemKind::Pendulum if ood => vec![(PI - 0.1, PI), (-1.0, 0.0)],
            SystemKind::Pendulum => vec![(0.0, PI / 2.0), (0.0, 0.0)],
            SystemKind::PredatorPrey if ood => vec![(100.0, 200.0), (10.0, 20.0)],
            SystemKind::PredatorPrey => vec![(1000.0, 2000.0), (10.0, 20.0)],
            SystemKind::Sir if ood => vec![(90.0, 100.0), (1.0, 5.0), (0.0, 0.0)],
            SystemKind::Sir => vec![(9.0, 10.0), (1.0, 5.0), (0.0, 0.0)],
            SystemKind::ComplexOde if ood => vec![(1.0, 1.5), (1.0, 1.5)],
            SystemKind::ComplexOde => vec![(0.5, 1.0), (0.5, 1.0)],
        };
        let w_mult = match (self, split) {
            (SystemKind::ComplexOde, Split::OodX0W) => (1.5, 2.0),
            (SystemKind::ComplexOde, _) => (1.0, 1.5),
            (_, Split::OodX0W) => (2.0, 3.0),
            _ => (1.0, 2.0),
        };
        EnvironmentSpec { split, x0_ranges, w_mult }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::PredatorPrey => "predator_prey",
            SystemKind::Sir => "sir",
            SystemKind::ComplexOde => "complex_ode",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pendulum" | "damped_pendulum" => Ok(SystemKind::Pendulum),
            "predator_prey" | "lotka_volterra" => Ok(SystemKind::PredatorPrey),
            "sir" | "epidemic" => Ok(SystemKind::Sir),
            "complex_ode" | "complex" => Ok(SystemKind::ComplexOde),
            _ => Err(Error::UnknownSystem(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "id")]
    Id,
    #[serde(rename = "ood-x0")]
    OodX0,
    #[serde(rename = "ood-x0-w")]
    OodX0W,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Id, Split::OodX0, Split::OodX0W];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Id => "id",
            Split::OodX0 => "ood-x0",
            Split::OodX0W => "ood-x0-w",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "id" => Ok(Split::Id),
            "ood-x0" => Ok(Split::OodX0),
            "ood-x0-w" => Ok(Split::OodX0W),
            _ => Err(Error::Invalid(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub d: usize,
    pub param_base: Vec<f64>,
}

/// Sampling distributions of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub split: Split,
    /// Per-dimension uniform ranges `[lo, hi)`; `lo == hi` pins the value.
    pub x0_ranges: Vec<(f64, f64)>,
    /// Parameters are drawn from `U(lo * base, hi * base)`.
    pub w_mult: (f64, f64),
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.x0_ranges.iter().any(|(lo, hi)| !(lo <= hi)) || !(self.w_mult.0 <= self.w_mult.1) {
            return Err(Error::Invalid("environment ranges must be ordered".into()));
        }
        Ok(())
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Exact right-hand side of a benchmark system for fixed parameters.
#[derive(Debug, Clone)]
pub struct TrueField {
    pub kind: SystemKind,
    pub w: Vec<f64>,
}

impl VectorField for TrueField {
    fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let w = &self.w;
        match self.kind {
            SystemKind::Pendulum => {
                out[0] = x[1];
                out[1] = -w[0] * w[0] * x[0].sin() - w[1] * x[1];
            }
            SystemKind::PredatorPrey => {
                out[0] = w[0] * x[0] - w[1] * x[0] * x[1];
                out[1] = w[3] * x[0] * x[1] - w[2] * x[1];
            }
            SystemKind::Sir => {
                let n = x[0] + x[1] + x[2];
                let inf = w[0] * x[0] * x[1] / n;
                out[0] = -inf;
                out[1] = inf - w[1] * x[1];
                out[2] = w[1] * x[1];
            }
            SystemKind::ComplexOde => {
                out[0] = w[0] * x[0].sin() + w[1] * (x[1] * x[1]).sin();
                out[1] = w[2] * x[0].sin() * x[1].cos();
            }
        }
    }
}

pub fn ground_truth_field(system: &SystemSpec, w: &[f64]) -> Result<TrueField> {
    if w.len() != system.kind.param_base().len() || system.d != system.kind.dim() {
        return Err(Error::Dimension(format!(
            "{} expects {} parameters, got {}",
            system.kind,
            system.kind.param_base().len(),
            w.len()
        )));
    }
    Ok(TrueField { kind: system.kind, w: w.to_vec() })
}

/// One experiment: a noisy observed trajectory plus diagnostics-only provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    /// Observations `x~_t` (noisy when `noise_sigma > 0`).
    pub trajectory: Trajectory,
    /// Diagnostics only; never consulted for fitting or adaptation.
    pub true_params: Vec<f64>,
    /// Noise-free simulation, kept only when it differs from the observations.
    pub clean: Option<Trajectory>,
    pub environment: EnvironmentSpec,
    pub noise_sigma: f64,
}

impl TaskRecord {
    /// Noise-free ground truth (the observations themselves for clean data).
    pub fn truth(&self) -> &Trajectory {
        self.clean.as_ref().unwrap_or(&self.trajectory)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub system: SystemSpec,
    pub environment: EnvironmentSpec,
    pub grid: TimeGrid,
    pub prefix_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of redraws caused by diverging simulations.
    pub retries: usize,
    pub tasks: Vec<TaskRecord>,
}

impl Dataset {
    /// Observed trajectories only; this is what fitting code receives.
    pub fn observations(&self) -> Vec<&Trajectory> {
        self.tasks.iter().map(|t| &t.trajectory).collect()
    }

    /// First `1 - fraction` of tasks for fitting, the rest for validation.
    pub fn split_validation(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_val = ((self.tasks.len() as f64) * fraction).round() as usize;
        let cut = self.tasks.len() - n_val.min(self.tasks.len());
        let mut train = self.clone();
        let mut val = self.clone();
        train.tasks.truncate(cut);
        val.tasks.drain(..cut);
        (train, val)
    }
}

/// Mix a run seed with a purpose tag (split, train/test role) into a stream key.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_RETRIES: usize = 100;

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn generate_task(
    system: &SystemSpec,
    env: &EnvironmentSpec,
    grid: &TimeGrid,
    noise_sigma: f64,
    seed: u64,
    task_id: usize,
) -> Result<(TaskRecord, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_id as u64);
    let guard = DivergenceGuard::default();
    for retry in 0..=MAX_RETRIES {
        let x0: Vec<f64> = env.x0_ranges.iter().map(|&(lo, hi)| sample_uniform(&mut rng, lo, hi)).collect();
        let w: Vec<f64> =
            system.param_base.iter().map(|b| sample_uniform(&mut rng, env.w_mult.0 * b, env.w_mult.1 * b)).collect();
        let field = ground_truth_field(system, &w)?;
        let clean = match integrate(&field, &x0, grid, &guard) {
            Ok(t) => t,
            Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let (observed, kept_clean) = if noise_sigma > 0.0 {
            let scales: Vec<f64> = (0..system.d).map(|j| noise_sigma * std_dev(&clean.column(j))).collect();
            let mut noisy = clean.clone();
            for row in noisy.states.iter_mut() {
                for (v, s) in row.iter_mut().zip(&scales) {
                    if *s > 0.0 {
                        *v += Normal::new(0.0, *s).expect("positive scale").sample(&mut rng);
                    }
                }
            }
            (noisy, Some(clean))
        } else {
            (clean, None)
        };
        let record = TaskRecord {
            task_id,
            trajectory: observed,
            true_params: w,
            clean: kept_clean,
            environment: env.clone(),
            noise_sigma,
        };
        return Ok((record, retry));
    }
    Err(Error::SimulationDiverged { task: task_id, retries: MAX_RETRIES })
}

/// Simulate `n_tasks` tasks from `env` on `grid`.
pub fn generate(
    system: &SystemSpec,
    env: &EnvironmentSpec,
    n_tasks: usize,
    grid: &TimeGrid,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    env.validate()?;
    if env.x0_ranges.len() != system.d {
        return Err(Error::Dimension("environment ranges do not match system dimension".into()));
    }
    let results: Vec<Result<(TaskRecord, usize)>> =
        (0..n_tasks).into_par_iter().map(|i| generate_task(system, env, grid, noise_sigma, seed, i)).collect();
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut retries = 0;
    for r in results {
        let (task, n) = r?;
        retries += n;
        tasks.push(task);
    }
    let prefix_len = if grid.n_steps == 100 {
        system.kind.default_prefix_len()
    } else {
        let frac = system.kind.default_prefix_len() as f64 / 100.0;
        ((grid.n_steps as f64 * frac).floor() as usize).clamp(1, grid.n_steps.saturating_sub(1).max(1))
    };
    Ok(Dataset {
        system: system.clone(),
        environment: env.clone(),
        grid: *grid,
        prefix_len,
        noise_sigma,
        seed,
        retries,
        tasks,
    })
}

/// Convenience wrapper using the system's default grid and noise level.
pub fn generate_default(kind: SystemKind, split: Split, n_tasks: usize, seed: u64) -> Result<Dataset> {
    generate(&kind.spec(), &kind.environment(split), n_tasks, &kind.default_grid(), kind.default_noise(), seed)
}

/// Split a trajectory into the observed prefix `t_0..=t_r` and the held-out rest.
pub fn split_prefix(traj: &Trajectory, prefix_len: usize) -> Result<(Trajectory, Trajectory)> {
    let n_steps = traj.grid.n_steps;
    if prefix_len < 1 || prefix_len >= n_steps {
        return Err(Error::OutOfRange(format!("prefix length {prefix_len} must lie in [1, {n_steps})")));
    }
    let observed = Trajectory { grid: traj.grid.shifted(0, prefix_len), states: traj.states[..=prefix_len].to_vec() };
    let held_out = Trajectory {
        grid: traj.grid.shifted(prefix_len + 1, n_steps - prefix_len - 1),
        states: traj.states[prefix_len + 1..].to_vec(),
    };
    Ok((observed, held_out))
}
