//! Test-time adaptation of per-task coefficients on an observed prefix,
//! forecasting, NRMSE scoring and the seed-replicated experiment driver.
//!
//! Adaptation runs in two stages. Stage 1 regresses finite-difference
//! derivatives of the prefix on the gated features. Stage 2 minimises the
//! prefix reconstruction error of a rollout, optionally estimating its
//! starting state along with the coefficients, with exact sensitivities
//! propagated through every RK4 substep of the same integrator used for
//! forecasting, and accepts a step only when it lowers that error.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisLibrary;
use crate::error::{Error, Result};
use crate::linalg::damped_gauss_newton;
use crate::model::{extract_equation, fit_weights_ls, rollout, MetaModel, TaskWeights};
use crate::ode_sim::{estimate_derivatives_with, DerivativeOptions, DivergenceGuard, TimeGrid, Trajectory};
use crate::sindy::{sindy_forecast_selected, SindyGrid};
use crate::systems::{derive_seed, generate, split_prefix, Dataset, Split, SystemKind};
use crate::trainer::{select_config, sweep_all, HyperConfig, SweepEntry, SweepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    Zeros,
    DerivativeFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    /// Damped Gauss–Newton directions.
    GaussNewton,
    /// Plain gradient steps of size `eta`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Maximum refinement iterations.
    pub steps: usize,
    /// Step size of the gradient method.
    pub eta: f64,
    pub warm_start: WarmStart,
    pub refine_with_rollout: bool,
    /// Prefix steps entering the refinement loss; `None` uses all of them.
    pub rollout_unroll_horizon: Option<usize>,
    pub method: RefineMethod,
    /// Weight each state's reconstruction error by its inverse prefix variance.
    pub standardize: bool,
    pub smooth_derivatives: bool,
    /// Estimate the rollout's starting state instead of pinning it to the
    /// first (noisy) observation.
    pub fit_initial_state: bool,
    /// Also refine from the mean training coefficients and keep whichever
    /// start reconstructs the prefix better.
    pub population_start: bool,
    /// Weight of a Gaussian prior on the coefficients, fitted to the training
    /// tasks; 0 disables it.
    pub prior_weight: f64,
    pub guard: DivergenceGuard,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            eta: 1e-2,
            warm_start: WarmStart::DerivativeFit,
            refine_with_rollout: true,
            rollout_unroll_horizon: None,
            method: RefineMethod::GaussNewton,
            standardize: true,
            smooth_derivatives: false,
            fit_initial_state: true,
            population_start: true,
            prior_weight: 1e-5,
            guard: DivergenceGuard::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapted {
    pub weights: TaskWeights,
    /// Refinement could not roll out the warm start; stage-1 weights kept.
    pub refine_diverged: bool,
    /// Prefix reconstruction loss of the warm start and of the result
    /// (`None` when not computed or not finite).
    pub warm_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    /// Estimated starting state of the prefix rollout, when fitted.
    pub initial_state: Option<Vec<f64>>,
}

/// Open-gate coordinates `(row, column)` in canonical order.
fn open_params(model: &MetaModel) -> Vec<(usize, usize)> {
    let g = model.gates();
    (0..model.d()).flat_map(|j| g.support(j).into_iter().map(move |k| (j, k))).collect()
}

/// Fixed-step RK4 rollout over `grid` with optional forward sensitivities
/// with respect to the coefficients at `params`, followed by `n_init`
/// starting-state components. Returns row-major states (`n x d`) and
/// sensitivities (`n x d x P`).
struct SensitivityRollout<'a> {
    lib: &'a BasisLibrary,
    model: &'a MetaModel,
    params: &'a [(usize, usize)],
    n_init: usize,
    guard: DivergenceGuard,
}

struct Stage {
    f: Vec<f64>,
    jac: Vec<f64>,
}

impl SensitivityRollout<'_> {
    /// Field value `k` and its parameter sensitivity `dk = A S + B` at `y`.
    fn stage(
        &self,
        coef: &[f64],
        y: &[f64],
        s: &[f64],
        k: &mut [f64],
        dk: &mut [f64],
        want_sens: bool,
        buf: &mut Stage,
    ) {
        let (d, m, n_w) = (self.lib.d, self.lib.m(), self.params.len());
        let p = n_w + self.n_init;
        self.lib.eval_into(&self.model.xi, y, &mut buf.f);
        for j in 0..d {
            k[j] = coef[j * m..(j + 1) * m].iter().zip(&buf.f).map(|(c, v)| c * v).sum();
        }
        if !want_sens {
            return;
        }
        self.lib.grad_x_into(&self.model.xi, y, &buf.f, &mut buf.jac);
        for j in 0..d {
            // A_ji = sum_k coef_jk dF_k/dx_i
            let mut a = vec![0.0; d];
            for kk in 0..m {
                let c = coef[j * m + kk];
                if c != 0.0 {
                    for i in 0..d {
                        a[i] += c * buf.jac[kk * d + i];
                    }
                }
            }
            for q in 0..p {
                let mut v = 0.0;
                for i in 0..d {
                    v += a[i] * s[i * p + q];
                }
                if let Some(&(pj, pk)) = self.params.get(q) {
                    if pj == j {
                        v += buf.f[pk];
                    }
                }
                dk[j * p + q] = v;
            }
        }
    }

    fn run(&self, w: &TaskWeights, x0: &[f64], grid: &TimeGrid, want_sens: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let (d, m, n_w) = (self.lib.d, self.lib.m(), self.params.len());
        let p = n_w + self.n_init;
        let g = self.model.gates();
        let coef: Vec<f64> =
            (0..d * m).map(|idx| if g.0[idx / m][idx % m] { w.0[idx / m][idx % m] } else { 0.0 }).collect();
        let n_sub = self.guard.n_sub.max(1);
        let h = grid.dt / n_sub as f64;
        let sp = if want_sens { d * p } else { 0 };
        let mut x = x0.to_vec();
        let mut s = vec![0.0; sp];
        if want_sens {
            for i in 0..self.n_init {
                s[i * p + n_w + i] = 1.0;
            }
        }
        let mut states = Vec::with_capacity(grid.n_points() * d);
        let mut sens = Vec::with_capacity(grid.n_points() * sp);
        states.extend_from_slice(&x);
        sens.extend_from_slice(&s);
        let mut buf = Stage { f: vec![0.0; m], jac: vec![0.0; m * d] };
        let mut ks = vec![vec![0.0; d]; 4];
        let mut dks = vec![vec![0.0; sp]; 4];
        let mut y = vec![0.0; d];
        let mut sy = vec![0.0; sp];
        for l in 0..grid.n_steps {
            for _ in 0..n_sub {
                for stage in 0..4 {
                    let frac = match stage {
                        0 => 0.0,
                        3 => h,
                        _ => 0.5 * h,
                    };
                    if stage == 0 {
                        y.copy_from_slice(&x);
                        sy.copy_from_slice(&s);
                    } else {
                        for i in 0..d {
                            y[i] = x[i] + frac * ks[stage - 1][i];
                        }
                        for i in 0..sp {
                            sy[i] = s[i] + frac * dks[stage - 1][i];
                        }
                    }
                    let (_, kr) = ks.split_at_mut(stage);
                    let (_, dr) = dks.split_at_mut(stage);
                    self.stage(&coef, &y, &sy, &mut kr[0], &mut dr[0], want_sens, &mut buf);
                }
                for i in 0..d {
                    x[i] += h / 6.0 * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]);
                }
                for i in 0..sp {
                    s[i] += h / 6.0 * (dks[0][i] + 2.0 * dks[1][i] + 2.0 * dks[2][i] + dks[3][i]);
                }
                if x.iter().any(|v| !v.is_finite() || v.abs() > self.guard.max_norm) || s.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::Diverged { last_valid: l });
                }
            }
            states.extend_from_slice(&x);
            sens.extend_from_slice(&s);
        }
        Ok((states, sens))
    }
}

/// Coefficients and rollout starting state being refined.
#[derive(Clone)]
struct Point {
    w: TaskWeights,
    x0: Vec<f64>,
}

/// Weighted prefix reconstruction problem of one task.
struct PrefixLoss<'a> {
    roll: SensitivityRollout<'a>,
    observed: Vec<f64>,
    grid: TimeGrid,
    /// `c_j / n` per state.
    weights: Vec<f64>,
    /// Gaussian prior on the open coefficients: (mean, precision) per parameter.
    prior: Vec<(f64, f64)>,
}

impl PrefixLoss<'_> {
    fn prior_term(&self, at: &Point) -> f64 {
        self.prior.iter().zip(self.roll.params).map(|(&(mu, prec), &(j, k))| prec * (at.w.0[j][k] - mu).powi(2)).sum()
    }

    fn loss(&self, at: &Point) -> Option<f64> {
        let (states, _) = self.roll.run(&at.w, &at.x0, &self.grid, false).ok()?;
        let d = at.x0.len();
        let v: f64 = states
            .iter()
            .zip(&self.observed)
            .enumerate()
            .map(|(i, (a, b))| self.weights[i % d] * (a - b).powi(2))
            .sum::<f64>()
            + self.prior_term(at);
        v.is_finite().then_some(v)
    }

    /// Loss, gradient and Gauss–Newton matrix in the refined parameters.
    fn linearize(&self, at: &Point) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let (states, sens) = self.roll.run(&at.w, &at.x0, &self.grid, true)?;
        let d = at.x0.len();
        let p = self.roll.params.len() + self.roll.n_init;
        let mut grad = vec![0.0; p];
        let mut gn = DMatrix::<f64>::zeros(p, p);
        let mut loss = 0.0;
        for (idx, (a, b)) in states.iter().zip(&self.observed).enumerate() {
            let c = self.weights[idx % d];
            let r = a - b;
            loss += c * r * r;
            let row = &sens[idx * p..(idx + 1) * p];
            for q in 0..p {
                grad[q] += 2.0 * c * r * row[q];
                for q2 in q..p {
                    gn[(q, q2)] += 2.0 * c * row[q] * row[q2];
                }
            }
        }
        for q in 0..p {
            for q2 in 0..q {
                gn[(q, q2)] = gn[(q2, q)];
            }
        }
        for (q, (&(mu, prec), &(j, k))) in self.prior.iter().zip(self.roll.params).enumerate() {
            grad[q] += 2.0 * prec * (at.w.0[j][k] - mu);
            gn[(q, q)] += 2.0 * prec;
        }
        loss += self.prior_term(at);
        Ok((loss, grad, gn))
    }
}

fn step(at: &Point, params: &[(usize, usize)], delta: &[f64], scale: f64) -> Point {
    let mut out = at.clone();
    for (&(j, k), dv) in params.iter().zip(delta) {
        out.w.0[j][k] += scale * dv;
    }
    for (x, dv) in out.x0.iter_mut().zip(&delta[params.len()..]) {
        *x += scale * dv;
    }
    out
}

/// Fit task coefficients to `prefix` with the model structure and shared
/// parameters frozen.
pub fn adapt(model: &MetaModel, prefix: &Trajectory, cfg: &AdaptConfig) -> Result<Adapted> {
    if prefix.dim() != model.d() {
        return Err(Error::Dimension(format!("prefix has {} states, model {}", prefix.dim(), model.d())));
    }
    let warm = match cfg.warm_start {
        WarmStart::Zeros => TaskWeights::zeros(model.d(), model.m()),
        WarmStart::DerivativeFit => {
            let targets = estimate_derivatives_with(prefix, DerivativeOptions { smooth: cfg.smooth_derivatives })?;
            fit_weights_ls(model, &prefix.states, &targets, 0.0)?
        }
    };
    let params = open_params(model);
    if !cfg.refine_with_rollout || cfg.steps == 0 || params.is_empty() || prefix.len() < 2 {
        return Ok(Adapted {
            weights: warm,
            refine_diverged: false,
            warm_loss: None,
            final_loss: None,
            iterations: 0,
            initial_state: None,
        });
    }
    let horizon = cfg.rollout_unroll_horizon.unwrap_or(prefix.grid.n_steps).min(prefix.grid.n_steps).max(1);
    let grid = TimeGrid { n_steps: horizon, ..prefix.grid };
    let d = model.d();
    let n = (horizon + 1) as f64;
    let weights: Vec<f64> = (0..d)
        .map(|j| {
            let c = if cfg.standardize {
                let col = prefix.column(j);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                if var > 0.0 && var.is_finite() {
                    1.0 / var
                } else {
                    1.0
                }
            } else {
                1.0
            };
            c / n
        })
        .collect();
    let n_init = if cfg.fit_initial_state { d } else { 0 };
    let problem = PrefixLoss {
        roll: SensitivityRollout { lib: &model.lib, model, params: &params, n_init, guard: cfg.guard },
        observed: prefix.states[..=horizon].iter().flatten().copied().collect(),
        grid,
        weights,
        prior: coefficient_prior(model, &params, cfg.prior_weight),
    };
    let x0 = &prefix.states[0];
    let mut starts = vec![warm.clone()];
    if cfg.population_start && !model.train_weights.is_empty() {
        starts.push(model.mean_train_weights());
    }
    // Keep the start that reconstructs the prefix best; ties go to the first.
    let mut best: Option<Refined> = None;
    let mut warm_loss = None;
    for (i, w) in starts.into_iter().enumerate() {
        let Some(r) = refine(&problem, &params, Point { w, x0: x0.clone() }, cfg)? else { continue };
        if i == 0 {
            warm_loss = Some(r.start_loss);
        }
        if best.as_ref().map_or(true, |b| r.loss < b.loss) {
            best = Some(r);
        }
    }
    let Some(best) = best else {
        return Ok(Adapted {
            weights: warm,
            refine_diverged: true,
            warm_loss: None,
            final_loss: None,
            iterations: 0,
            initial_state: None,
        });
    };
    let initial_state = cfg.fit_initial_state.then(|| best.point.x0.clone());
    Ok(Adapted {
        weights: best.point.w,
        refine_diverged: false,
        warm_loss,
        final_loss: Some(best.loss),
        iterations: best.iterations,
        initial_state,
    })
}

/// Per-coefficient mean and precision `rho / s^2` from the training tasks'
/// fitted coefficients. Empty when disabled or without training fits.
fn coefficient_prior(model: &MetaModel, params: &[(usize, usize)], rho: f64) -> Vec<(f64, f64)> {
    if rho <= 0.0 || model.train_weights.is_empty() {
        return Vec::new();
    }
    let n = model.train_weights.len() as f64;
    params
        .iter()
        .map(|&(j, k)| {
            let mu = model.train_weights.iter().map(|w| w.0[j][k]).sum::<f64>() / n;
            let var = model.train_weights.iter().map(|w| (w.0[j][k] - mu).powi(2)).sum::<f64>() / n;
            let s = var.sqrt().max(1e-3 * (mu.abs() + 1e-3));
            (mu, rho / (s * s))
        })
        .collect()
}

struct Refined {
    point: Point,
    start_loss: f64,
    loss: f64,
    iterations: usize,
}

/// Descend the prefix loss from `current`. `None` when the start cannot be
/// rolled out.
fn refine(
    problem: &PrefixLoss,
    params: &[(usize, usize)],
    mut current: Point,
    cfg: &AdaptConfig,
) -> Result<Option<Refined>> {
    let (mut loss, mut grad, mut gn) = match problem.linearize(&current) {
        Ok(v) => v,
        Err(Error::Diverged { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let start_loss = loss;
    let mut iterations = 0;
    while iterations < cfg.steps {
        let direction = match cfg.method {
            RefineMethod::GaussNewton => match damped_gauss_newton(&gn, &grad) {
                Some(dir) => dir,
                None => break,
            },
            RefineMethod::Gradient => grad.iter().map(|g| -cfg.eta * g).collect(),
        };
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=20 {
            let trial = step(&current, params, &direction, scale);
            if let Some(l) = problem.loss(&trial) {
                if l < loss {
                    accepted = Some((trial, l));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((next, next_loss)) = accepted else { break };
        iterations += 1;
        let rel = (loss - next_loss) / loss.max(f64::MIN_POSITIVE);
        current = next;
        match problem.linearize(&current) {
            Ok((l, g, h)) => {
                loss = l;
                grad = g;
                gn = h;
            }
            Err(_) => {
                loss = next_loss;
                break;
            }
        }
        if rel < 1e-12 {
            break;
        }
    }
    Ok(Some(Refined { point: current, start_loss, loss, iterations }))
}

/// Roll the adapted model forward from the last prefix state over `horizon`.
pub fn forecast(model: &MetaModel, w: &TaskWeights, prefix: &Trajectory, horizon: &TimeGrid) -> Result<Trajectory> {
    if prefix.is_empty() {
        return Err(Error::TooShort { need: 1, got: 0 });
    }
    rollout(model, w, prefix.last(), horizon)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrmsePooling {
    /// Standardise every state by its own ground-truth deviation, then pool.
    #[default]
    PerDimension,
    /// Pool raw errors and divide by the deviation of all truth cells.
    Raw,
}

/// Root-mean-square forecast error relative to the ground truth spread.
pub fn nrmse(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    nrmse_with(pred, truth, NrmsePooling::PerDimension)
}

pub fn nrmse_with(pred: &Trajectory, truth: &Trajectory, pooling: NrmsePooling) -> Result<f64> {
    if pred.len() != truth.len() || pred.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.len(),
            pred.dim(),
            truth.len(),
            truth.dim()
        )));
    }
    if truth.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let n = truth.len() as f64;
    let d = truth.dim();
    let std_of = |vals: &[f64]| {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    match pooling {
        NrmsePooling::PerDimension => {
            let mut acc = 0.0;
            for j in 0..d {
                let t = truth.column(j);
                let s = std_of(&t);
                if !(s > 0.0) {
                    return Err(Error::ZeroVariance);
                }
                acc += pred.states.iter().zip(&t).map(|(p, tv)| ((p[j] - tv) / s).powi(2)).sum::<f64>();
            }
            Ok((acc / (n * d as f64)).sqrt())
        }
        NrmsePooling::Raw => {
            let cells: Vec<f64> = truth.states.iter().flatten().copied().collect();
            let s = std_of(&cells);
            if !(s > 0.0) {
                return Err(Error::ZeroVariance);
            }
            let mse = pred.states.iter().flatten().zip(&cells).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
                / cells.len() as f64;
            Ok(mse.sqrt() / s)
        }
    }
}

/// How test-task coefficients are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Adapt(AdaptConfig),
    /// Mean of the training-task coefficients, no adaptation.
    MeanTrainWeights,
    /// Per-task sparse regression on the prefix alone.
    Sindy(SindyGrid),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Adapt(_) => "metaphysica",
            Method::MeanTrainWeights => "no_adapt",
            Method::Sindy(_) => "sindy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: usize,
    /// `None` is a NaN* outcome.
    pub nrmse: Option<f64>,
    pub nan_star: bool,
    pub refine_diverged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub system: SystemKind,
    pub split: Split,
    pub method: String,
    pub seed: u64,
    pub tasks: Vec<TaskOutcome>,
    /// Mean and population std over tasks without NaN*.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub nan_star_count: usize,
    /// Any NaN* outcome taints the mean.
    pub nan_star_tainted: bool,
    pub empty: bool,
    pub equation: String,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Forecast paired with its ground truth, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskForecast {
    pub task_id: usize,
    pub prediction: Option<Trajectory>,
    pub truth: Trajectory,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Score `method` on every task of `test`: adapt on the prefix, forecast
/// the held-out window and compare against the noise-free truth.
pub fn evaluate(
    model: &MetaModel,
    test: &Dataset,
    method: &Method,
    seed: u64,
) -> Result<(EvalReport, Vec<TaskForecast>)> {
    let mean_w = model.mean_train_weights();
    let r = test.prefix_len;
    let results: Vec<(TaskOutcome, TaskForecast)> = test
        .tasks
        .par_iter()
        .map(|task| {
            let outcome = |nrmse: Option<f64>, refine_diverged: bool, failure: Option<String>| TaskOutcome {
                task_id: task.task_id,
                nan_star: nrmse.is_none(),
                nrmse,
                refine_diverged,
                failure,
            };
            let (_, held) = match split_prefix(task.truth(), r) {
                Ok(v) => v,
                Err(e) => {
                    let truth = task.truth().clone();
                    return (
                        outcome(None, false, Some(e.to_string())),
                        TaskForecast { task_id: task.task_id, prediction: None, truth },
                    );
                }
            };
            let (prefix, _) = split_prefix(&task.trajectory, r).expect("same shape as truth");
            let horizon = test.grid.shifted(r, test.grid.n_steps - r);
            let predicted: Result<(Trajectory, bool)> = match method {
                Method::Adapt(cfg) => adapt(model, &prefix, cfg)
                    .and_then(|a| forecast(model, &a.weights, &prefix, &horizon).map(|f| (f, a.refine_diverged))),
                Method::MeanTrainWeights => forecast(model, &mean_w, &prefix, &horizon).map(|f| (f, false)),
                Method::Sindy(grid) => sindy_forecast_selected(&prefix, &horizon, &model.lib, grid).map(|f| (f, false)),
            };
            match predicted {
                Ok((full, refine_diverged)) => {
                    let pred = Trajectory { grid: held.grid, states: full.states[1..].to_vec() };
                    match nrmse(&pred, &held) {
                        Ok(v) if v.is_finite() => (
                            outcome(Some(v), refine_diverged, None),
                            TaskForecast { task_id: task.task_id, prediction: Some(pred), truth: held },
                        ),
                        Ok(_) => (
                            outcome(None, refine_diverged, Some("non-finite error".into())),
                            TaskForecast { task_id: task.task_id, prediction: None, truth: held },
                        ),
                        Err(e) => (
                            outcome(None, refine_diverged, Some(e.to_string())),
                            TaskForecast { task_id: task.task_id, prediction: Some(pred), truth: held },
                        ),
                    }
                }
                Err(e) => (
                    outcome(None, false, Some(e.to_string())),
                    TaskForecast { task_id: task.task_id, prediction: None, truth: held },
                ),
            }
        })
        .collect();
    let (tasks, forecasts): (Vec<TaskOutcome>, Vec<TaskForecast>) = results.into_iter().unzip();
    let ok: Vec<f64> = tasks.iter().filter_map(|t| t.nrmse).collect();
    let (mean, std) = mean_std(&ok);
    let nan_star_count = tasks.iter().filter(|t| t.nan_star).count();
    let equation = match method {
        Method::Sindy(_) => String::new(),
        _ => extract_equation(model, None),
    };
    let report = EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        system: test.system.kind,
        split: test.environment.split,
        method: method.name().to_string(),
        seed,
        empty: tasks.is_empty(),
        tasks,
        mean,
        std,
        nan_star_count,
        nan_star_tainted: nan_star_count > 0,
        equation,
    };
    Ok((report, forecasts))
}

/// Which sweep results count as a run: every configuration, or the
/// ablated subsets of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Sparsity weight forced to zero across the grid.
    NoL1,
    /// Mean training coefficients instead of adaptation.
    NoAdapt,
    /// Variance weight forced to zero across the grid.
    NoVrex,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "no_l1" => Ok(Ablation::NoL1),
            "no_adapt" => Ok(Ablation::NoAdapt),
            "no_vrex" => Ok(Ablation::NoVrex),
            other => Err(Error::Invalid(format!("unknown ablation '{other}'"))),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoL1 => "no_l1",
            Ablation::NoAdapt => "no_adapt",
            Ablation::NoVrex => "no_vrex",
        }
    }

    /// The grid this ablation trains on.
    pub fn grid(self, grid: &SweepGrid) -> SweepGrid {
        let mut g = grid.clone();
        match self {
            Ablation::NoL1 => g.lambda_phi = vec![0.0],
            Ablation::NoVrex => g.lambda_rex = vec![0.0],
            Ablation::NoAdapt => {}
        }
        g
    }
}

/// Library used for a system: the composed dictionary for the complex ODE.
pub fn default_library(kind: SystemKind) -> BasisLibrary {
    let lib = BasisLibrary::standard(kind.dim());
    if kind == SystemKind::ComplexOde {
        lib.compose_layer2().expect("fresh library")
    } else {
        lib
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub splits: Vec<Split>,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub grid: SweepGrid,
    pub adapt: AdaptConfig,
    pub val_fraction: f64,
    /// Observation noise; `None` uses the system default.
    pub noise_sigma: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(system: SystemKind) -> Self {
        Self {
            system,
            splits: vec![Split::Id, Split::OodX0, Split::OodX0W],
            n_train: 1000,
            n_test: 200,
            seeds: (0..5).collect(),
            grid: SweepGrid::default(),
            adapt: AdaptConfig::default(),
            val_fraction: 0.2,
            noise_sigma: None,
        }
    }

    fn noise(&self) -> f64 {
        self.noise_sigma.unwrap_or_else(|| self.system.default_noise())
    }

    /// Training set of `seed` (before the validation carve).
    pub fn train_data(&self, seed: u64) -> Result<Dataset> {
        let k = self.system;
        generate(
            &k.spec(),
            &k.environment(Split::Id),
            self.n_train,
            &k.default_grid(),
            self.noise(),
            derive_seed(seed, "train"),
        )
    }

    pub fn test_data(&self, seed: u64, split: Split) -> Result<Dataset> {
        let k = self.system;
        let tag = format!("test-{split}");
        generate(
            &k.spec(),
            &k.environment(split),
            self.n_test,
            &k.default_grid(),
            self.noise(),
            derive_seed(seed, &tag),
        )
    }
}

/// All fitted sweep configurations of one seed.
#[derive(Debug, Clone)]
pub struct SeedSweep {
    pub seed: u64,
    pub entries: Vec<SweepEntry>,
    pub models: Vec<Option<MetaModel>>,
}

impl SeedSweep {
    pub fn run(cfg: &ExperimentConfig, seed: u64, grid: &SweepGrid) -> Result<Self> {
        let data = cfg.train_data(seed)?;
        let (train, val) = data.split_validation(cfg.val_fraction);
        let (entries, models) = sweep_all(&train, &val, &default_library(cfg.system), grid, seed)?;
        Ok(Self { seed, entries, models })
    }

    /// Model chosen by the selection rule among entries accepted by `keep`.
    /// Selecting among a grid's subset is the same as sweeping that subset,
    /// since every configuration is trained independently from the seed.
    pub fn select(&self, keep: impl Fn(&HyperConfig) -> bool) -> Result<MetaModel> {
        let candidates: Vec<Option<(f64, usize)>> =
            self.entries.iter().map(|e| if keep(&e.config) { e.val_loss.zip(e.n_active) } else { None }).collect();
        let i = select_config(&candidates).ok_or(Error::AllConfigsFailed)?;
        let mut model = self.models[i].clone().expect("selected entry has a model");
        model.selection = Some(crate::model::SelectionRecord {
            config: self.entries[i].config.clone(),
            val_loss: self.entries[i].val_loss.expect("selected entry has a loss"),
            n_active: self.entries[i].n_active.expect("selected entry has a count"),
        });
        Ok(model)
    }

    pub fn select_all(&self) -> Result<MetaModel> {
        self.select(|_| true)
    }

    pub fn select_ablation(&self, ablation: Ablation) -> Result<MetaModel> {
        match ablation {
            Ablation::NoVrex => self.select(|c| c.lambda_rex == 0.0),
            Ablation::NoL1 => self.select(|c| c.lambda_phi == 0.0),
            Ablation::NoAdapt => self.select_all(),
        }
    }
}

/// Mean and population std of per-seed means for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub method: String,
    pub seed_means: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub nan_star_count: usize,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<SplitSummary> {
    let mut keys: Vec<(Split, String)> = Vec::new();
    for r in reports {
        let k = (r.split, r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(split, method)| {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.split == split && r.method == method).collect();
            let seed_means: Vec<Option<f64>> = rs.iter().map(|r| r.mean).collect();
            let (mean, std) = mean_std(&seed_means.iter().flatten().copied().collect::<Vec<_>>());
            SplitSummary {
                split,
                method,
                seed_means,
                mean,
                std,
                nan_star_count: rs.iter().map(|r| r.nan_star_count).sum(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub sweeps: Vec<SeedSweep>,
    pub models: Vec<MetaModel>,
    pub reports: Vec<EvalReport>,
    pub summary: Vec<SplitSummary>,
}

/// Full pipeline per seed: generate, sweep and select, then adapt and score
/// every test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sweeps = Vec::new();
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let sweep = SeedSweep::run(cfg, seed, &cfg.grid)?;
        let model = sweep.select_all()?;
        for &split in &cfg.splits {
            let test = cfg.test_data(seed, split)?;
            reports.push(evaluate(&model, &test, &Method::Adapt(cfg.adapt.clone()), seed)?.0);
        }
        sweeps.push(sweep);
        models.push(model);
    }
    let summary = summarize(&reports);
    Ok(ExperimentResult { sweeps, models, reports, summary })
}

/// One ablation across seeds and splits. `NoVrex` and `NoL1` train on the
/// reduced grid; `NoAdapt` reuses the full selection with mean training
/// coefficients.
pub fn run_ablation(cfg: &ExperimentConfig, ablation: Ablation) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let grid = ablation.grid(&cfg.grid);
        let sweep = SeedSweep::run(cfg, seed, &grid)?;
        let model = sweep.select_all()?;
        let method = match ablation {
            Ablation::NoAdapt => Method::MeanTrainWeights,
            _ => Method::Adapt(cfg.adapt.clone()),
        };
        for &split in &cfg.splits {
            let test = cfg.test_data(seed, split)?;
            let mut report = evaluate(&model, &test, &method, seed)?.0;
            report.method = ablation.name().to_string();
            reports.push(report);
        }
    }
    Ok(reports)
}
