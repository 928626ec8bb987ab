//! Joint training of gate logits, shared sine parameters and per-task
//! coefficients on the derivative-matching objective
//!
//! `mean_i R_i + λ_Φ ||Φ||₁ + λ_REx Var_i(R_i)`,
//!
//! with straight-through gradients for the binarized gates, plus the
//! hyperparameter sweep and its sparsity-first selection rule.
//!
//! Internally the optimizer works on scale-free coefficients: with `s_j`
//! the RMS of the derivative targets of state `j` and `g_k` the RMS of
//! feature `k` over the training set, it updates `u_jk = W_jk g_k / s_j`
//! and weights the squared error of row `j` by `1 / s_j²`. The public
//! [`task_risk`] and [`total_loss`] use unit weights.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisLibrary, GlobalParams};
use crate::error::{Error, Result};
use crate::linalg::damped_gauss_newton;
use crate::model::{fit_weights_ls, gate_open, GateLogits, MetaModel, SelectionRecord, TaskWeights};
use crate::ode_sim::{estimate_derivatives_with, DerivativeOptions, Trajectory};
use crate::systems::{split_prefix, Dataset, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
    Sgd,
}

/// What the sparsity penalty is applied to. Both route their gradient
/// through `σ'(Φ̃)`; they differ only in the reported penalty value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Routing {
    Binarized,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrexScope {
    /// Variance of the risks inside each minibatch.
    Minibatch,
    /// Variance around the full-dataset mean risk, refreshed every epoch.
    Epoch,
}

/// Missing fields take their default values when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub lambda_phi: f64,
    pub lambda_rex: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_tasks: usize,
    pub optimizer: Optimizer,
    pub l1_routing: L1Routing,
    pub vrex_scope: VrexScope,
    pub logit_init: f64,
    /// Moving-average the observations before differencing.
    pub smooth_derivatives: bool,
    /// Scale-free coefficients and per-state error weights (see module docs).
    pub normalize: bool,
    pub train_gates: bool,
    pub train_xi: bool,
    /// Gauss–Newton iterations on the shared parameters after the last
    /// epoch, with gates fixed and per-task coefficients re-solved by least
    /// squares; 0 keeps the optimizer's final values.
    pub xi_refine_iters: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lambda_phi: 1e-3,
            lambda_rex: 0.0,
            eta: 1e-2,
            epochs: 2000,
            batch_tasks: 128,
            optimizer: Optimizer::Adam,
            l1_routing: L1Routing::Binarized,
            vrex_scope: VrexScope::Minibatch,
            logit_init: 0.5,
            smooth_derivatives: false,
            normalize: true,
            train_gates: true,
            train_xi: true,
            xi_refine_iters: 50,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.lambda_phi, self.lambda_rex, self.eta];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("lambda_phi, lambda_rex and eta must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_tasks == 0 {
            return Err(Error::Invalid("epochs and batch_tasks must be at least 1".into()));
        }
        if !self.logit_init.is_finite() {
            return Err(Error::Invalid("logit_init must be finite".into()));
        }
        Ok(())
    }

    fn derivative_options(&self) -> DerivativeOptions {
        DerivativeOptions { smooth: self.smooth_derivatives }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRisk {
    pub task_id: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub total_loss: Vec<f64>,
    pub mean_risk: Vec<f64>,
    pub l1: Vec<f64>,
    pub vrex: Vec<f64>,
    pub val_loss: Option<f64>,
    pub n_active: usize,
    pub wall_time_s: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Population variance (divides by the count).
fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    // shifting by the first value makes equal inputs give exactly zero
    let n = v.len() as f64;
    let shift = v[0];
    let mean = v.iter().map(|r| r - shift).sum::<f64>() / n;
    v.iter().map(|r| (r - shift - mean).powi(2)).sum::<f64>() / n
}

pub fn vrex_penalty(risks: &[TaskRisk]) -> f64 {
    population_variance(&risks.iter().map(|r| r.value).collect::<Vec<_>>())
}

/// Observed states, derivative targets and the parameter-free leading
/// polynomial features of one task, all row-major.
#[derive(Debug, Clone)]
struct TaskData {
    n: usize,
    states: Vec<f64>,
    targets: Vec<f64>,
    poly: Vec<f64>,
    n_poly: usize,
}

impl TaskData {
    fn new(traj: &Trajectory, opts: DerivativeOptions, lib: &BasisLibrary) -> Result<Self> {
        if traj.dim() != lib.d {
            return Err(Error::Dimension(format!("trajectory has {} states, library expects {}", traj.dim(), lib.d)));
        }
        let targets = estimate_derivatives_with(traj, opts)?;
        let n_poly = lib.n_leading_polynomial();
        let mut f = vec![0.0; lib.m()];
        let mut poly = Vec::with_capacity(traj.len() * n_poly);
        for x in &traj.states {
            lib.eval_polynomial_into(x, &mut f);
            poly.extend_from_slice(&f[..n_poly]);
        }
        Ok(Self {
            n: traj.len(),
            states: traj.states.iter().flatten().copied().collect(),
            targets: targets.into_iter().flatten().collect(),
            poly,
            n_poly,
        })
    }
}

/// Risk of one task and its gradients with respect to the task weights,
/// the (continuous) gate values and the shared parameters.
struct RiskGrad {
    risk: f64,
    w: Vec<f64>,
    gate: Vec<f64>,
    xi: Vec<f64>,
}

/// `row_weights[j]` multiplies the squared error of state `j`; `gate` holds
/// gate values (binary during training, arbitrary reals for checks).
fn risk_and_grad(
    lib: &BasisLibrary,
    xi: &GlobalParams,
    gate: &[f64],
    w: &[f64],
    data: &TaskData,
    row_weights: &[f64],
    want_grad: bool,
) -> RiskGrad {
    let (d, m) = (lib.d, lib.m());
    let mut out = RiskGrad {
        risk: 0.0,
        w: if want_grad { vec![0.0; d * m] } else { Vec::new() },
        gate: if want_grad { vec![0.0; d * m] } else { Vec::new() },
        xi: if want_grad { vec![0.0; lib.n_xi] } else { Vec::new() },
    };
    let coef: Vec<f64> = w.iter().zip(gate).map(|(a, b)| a * b).collect();
    let mut f = vec![0.0; m];
    let mut e = vec![0.0; d];
    let mut h = vec![0.0; if want_grad { d * m } else { 0 }];
    let mut partials: Vec<(usize, usize, f64)> = Vec::with_capacity(4 * lib.n_xi);
    let inv_n = 1.0 / data.n as f64;
    let np = data.n_poly;
    for l in 0..data.n {
        let x = &data.states[l * d..(l + 1) * d];
        let y = &data.targets[l * d..(l + 1) * d];
        f[..np].copy_from_slice(&data.poly[l * np..(l + 1) * np]);
        partials.clear();
        lib.eval_parametric_with_xi_partials(xi, x, &mut f, |k, s, v| {
            if want_grad {
                partials.push((k, s, v))
            }
        });
        for j in 0..d {
            let pred: f64 = coef[j * m..(j + 1) * m].iter().zip(&f).map(|(c, v)| c * v).sum();
            let r = pred - y[j];
            out.risk += row_weights[j] * r * r;
            e[j] = 2.0 * row_weights[j] * r * inv_n;
        }
        if !want_grad {
            continue;
        }
        // H = Eᵀ F; the weight and gate gradients are H masked by the gates
        // and by the weights respectively.
        for (j, &ej) in e.iter().enumerate() {
            for (hk, fk) in h[j * m..(j + 1) * m].iter_mut().zip(&f[..m]) {
                *hk += ej * fk;
            }
        }
        for &(k, s, v) in &partials {
            let ak: f64 = (0..d).map(|j| e[j] * coef[j * m + k]).sum();
            out.xi[s] += ak * v;
        }
    }
    if want_grad {
        for idx in 0..d * m {
            out.w[idx] = h[idx] * gate[idx];
            out.gate[idx] = h[idx] * w[idx];
        }
    }
    out.risk *= inv_n;
    out
}

/// Gradient and Gauss–Newton matrix (row-major, `n_xi x n_xi`) of one
/// task's risk with respect to the shared parameters when its coefficients
/// are the least-squares fit `w`. The Jacobian of each state's residuals
/// is projected off that state's open feature columns, so the curvature is
/// that of the risk with the coefficients re-solved.
fn xi_normal_equations(
    lib: &BasisLibrary,
    xi: &GlobalParams,
    gate: &[f64],
    w: &[f64],
    data: &TaskData,
    row_weights: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (d, m, q, n) = (lib.d, lib.m(), lib.n_xi, data.n);
    let coef: Vec<f64> = w.iter().zip(gate).map(|(a, b)| a * b).collect();
    let mut grad = vec![0.0; q];
    let mut mat = vec![0.0; q * q];
    let mut feats = DMatrix::<f64>::zeros(n, m);
    let mut jac = vec![DMatrix::<f64>::zeros(n, q); d];
    let mut resid = vec![vec![0.0; n]; d];
    let mut f = vec![0.0; m];
    let np = data.n_poly;
    for l in 0..n {
        let x = &data.states[l * d..(l + 1) * d];
        let y = &data.targets[l * d..(l + 1) * d];
        f[..np].copy_from_slice(&data.poly[l * np..(l + 1) * np]);
        lib.eval_parametric_with_xi_partials(xi, x, &mut f, |k, s, v| {
            for (j, jj) in jac.iter_mut().enumerate() {
                jj[(l, s)] += coef[j * m + k] * v;
            }
        });
        for k in 0..m {
            feats[(l, k)] = f[k];
        }
        for j in 0..d {
            resid[j][l] = coef[j * m..(j + 1) * m].iter().zip(&f).map(|(c, v)| c * v).sum::<f64>() - y[j];
        }
    }
    for j in 0..d {
        let c = 2.0 * row_weights[j] / n as f64;
        let cols: Vec<usize> = (0..m).filter(|&k| gate[j * m + k] != 0.0).collect();
        let mut proj = jac[j].clone();
        if !cols.is_empty() {
            let a = feats.select_columns(&cols);
            if let Ok(z) = a.clone().svd(true, true).solve(&jac[j], 1e-12) {
                proj -= a * z;
            }
        }
        for a in 0..q {
            grad[a] += c * (0..n).map(|l| resid[j][l] * jac[j][(l, a)]).sum::<f64>();
            for b in 0..q {
                mat[a * q + b] += c * proj.column(a).dot(&proj.column(b));
            }
        }
    }
    (grad, mat)
}

/// Mean squared derivative error of `w` on the observed trajectory of `task`.
pub fn task_risk(model: &MetaModel, w: &TaskWeights, task: &TaskRecord) -> Result<TaskRisk> {
    let data = TaskData::new(&task.trajectory, DerivativeOptions::default(), &model.lib)?;
    let gate = binary_gates(&model.gate_logits);
    let r = risk_and_grad(&model.lib, &model.xi, &gate, &flat(w), &data, &vec![1.0; model.d()], false);
    if !r.risk.is_finite() {
        return Err(Error::NonFinite(format!("risk of task {}", task.task_id)));
    }
    Ok(TaskRisk { task_id: task.task_id, value: r.risk })
}

fn flat(w: &TaskWeights) -> Vec<f64> {
    w.0.iter().flatten().copied().collect()
}

fn unflat(v: &[f64], d: usize, m: usize) -> Vec<Vec<f64>> {
    (0..d).map(|j| v[j * m..(j + 1) * m].to_vec()).collect()
}

fn binary_gates(logits: &GateLogits) -> Vec<f64> {
    logits.0.iter().flatten().map(|&l| if gate_open(l) { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mean_risk: f64,
    pub l1: f64,
    pub vrex: f64,
    pub risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// With respect to the gate logits (straight-through) or, from
    /// [`total_loss_relaxed`], the gate values themselves.
    pub gates: Vec<Vec<f64>>,
    pub xi: Vec<f64>,
    pub weights: Vec<TaskWeights>,
}

/// Objective over `tasks` for gate values `gate` (row-major `d x m`).
fn objective(
    lib: &BasisLibrary,
    xi: &GlobalParams,
    gate: &[f64],
    weights: &[TaskWeights],
    data: &[TaskData],
    cfg: &HyperConfig,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>, Vec<TaskWeights>)> {
    let (d, m) = (lib.d, lib.m());
    if weights.len() != data.len() {
        return Err(Error::Dimension(format!("{} weight sets for {} tasks", weights.len(), data.len())));
    }
    let unit = vec![1.0; d];
    let parts: Vec<RiskGrad> = data
        .par_iter()
        .zip(weights.par_iter())
        .map(|(t, w)| risk_and_grad(lib, xi, gate, &flat(w), t, &unit, true))
        .collect();
    let risks: Vec<f64> = parts.iter().map(|p| p.risk).collect();
    let n = risks.len().max(1) as f64;
    let mean = risks.iter().sum::<f64>() / n;
    let vrex = population_variance(&risks);
    let l1: f64 = gate.iter().sum();
    let total = mean + cfg.lambda_phi * l1 + cfg.lambda_rex * vrex;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let mut g_gate = vec![cfg.lambda_phi; d * m];
    let mut g_xi = vec![0.0; lib.n_xi];
    let mut g_w = Vec::with_capacity(parts.len());
    for (p, r) in parts.iter().zip(&risks) {
        let c = 1.0 / n + cfg.lambda_rex * 2.0 * (r - mean) / n;
        g_gate.iter_mut().zip(&p.gate).for_each(|(a, b)| *a += c * b);
        g_xi.iter_mut().zip(&p.xi).for_each(|(a, b)| *a += c * b);
        g_w.push(TaskWeights(unflat(&p.w.iter().map(|v| c * v).collect::<Vec<_>>(), d, m)));
    }
    let breakdown =
        LossBreakdown { total, mean_risk: mean, l1: cfg.lambda_phi * l1, vrex: cfg.lambda_rex * vrex, risks };
    Ok((breakdown, g_gate, g_xi, g_w))
}

fn task_data(tasks: &[&Trajectory], cfg: &HyperConfig, lib: &BasisLibrary) -> Result<Vec<TaskData>> {
    tasks.iter().map(|t| TaskData::new(t, cfg.derivative_options(), lib)).collect()
}

/// Full-batch objective with unit error weights and binarized gates. Gate
/// gradients are straight-through: `∂L/∂Φ · σ'(Φ̃)`.
pub fn total_loss(
    model: &MetaModel,
    weights: &[TaskWeights],
    tasks: &[&Trajectory],
    cfg: &HyperConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let data = task_data(tasks, cfg, &model.lib)?;
    let gate = binary_gates(&model.gate_logits);
    let (mut loss, g_gate, g_xi, g_w) = objective(&model.lib, &model.xi, &gate, weights, &data, cfg)?;
    if cfg.l1_routing == L1Routing::Soft {
        loss.total -= loss.l1;
        loss.l1 = cfg.lambda_phi * model.gate_logits.0.iter().flatten().map(|&l| sigmoid(l)).sum::<f64>();
        loss.total += loss.l1;
    }
    let logits: Vec<f64> = model.gate_logits.0.iter().flatten().copied().collect();
    let ste: Vec<f64> = g_gate.iter().zip(&logits).map(|(g, l)| g * sigmoid_prime(*l)).collect();
    Ok((loss, Gradients { gates: unflat(&ste, model.d(), model.m()), xi: g_xi, weights: g_w }))
}

/// The same objective with real-valued gate values in place of the
/// binarized gates (`||Φ||₁` read as the plain sum). Its gradient with
/// respect to the gate values is what the straight-through estimator
/// multiplies by `σ'(Φ̃)`.
pub fn total_loss_relaxed(
    model: &MetaModel,
    gate_values: &[Vec<f64>],
    weights: &[TaskWeights],
    tasks: &[&Trajectory],
    cfg: &HyperConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let data = task_data(tasks, cfg, &model.lib)?;
    let gate: Vec<f64> = gate_values.iter().flatten().copied().collect();
    if gate.len() != model.d() * model.m() {
        return Err(Error::Dimension("gate values must be d x m".into()));
    }
    let (loss, g_gate, g_xi, g_w) = objective(&model.lib, &model.xi, &gate, weights, &data, cfg)?;
    Ok((loss, Gradients { gates: unflat(&g_gate, model.d(), model.m()), xi: g_xi, weights: g_w }))
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], eta: f64, kind: Optimizer) {
        if kind == Optimizer::Sgd {
            params.iter_mut().zip(grad).for_each(|(p, g)| *p -= eta * g);
            return;
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= eta * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    let r = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// Training data with precomputed derivative targets and scales.
pub struct Trainer {
    lib: BasisLibrary,
    state_names: Vec<String>,
    data: Vec<TaskData>,
    /// RMS of the derivative targets per state.
    target_scale: Vec<f64>,
    /// RMS of every feature at the initial shared parameters.
    feature_scale: Vec<f64>,
    opts: DerivativeOptions,
}

impl Trainer {
    pub fn new(train: &Dataset, lib: BasisLibrary, smooth_derivatives: bool) -> Result<Self> {
        let d = train.system.d;
        if lib.d != d {
            return Err(Error::Dimension(format!("library for {} states, system has {d}", lib.d)));
        }
        let opts = DerivativeOptions { smooth: smooth_derivatives };
        let data: Vec<TaskData> =
            train.tasks.iter().map(|t| TaskData::new(&t.trajectory, opts, &lib)).collect::<Result<_>>()?;
        let target_scale =
            (0..d).map(|j| rms(data.iter().flat_map(|t| t.targets.iter().skip(j).step_by(d).copied()))).collect();
        let xi = lib.default_xi();
        let m = lib.m();
        let mut sums = vec![0.0; m];
        let mut count = 0usize;
        let mut f = vec![0.0; m];
        for t in &data {
            for x in t.states.chunks(d) {
                lib.eval_into(&xi, x, &mut f);
                sums.iter_mut().zip(&f).for_each(|(s, v)| *s += v * v);
                count += 1;
            }
        }
        let feature_scale = sums
            .iter()
            .map(|s| {
                let r = (s / count.max(1) as f64).sqrt();
                if r > 0.0 && r.is_finite() {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { lib, state_names: train.system.kind.state_names(), data, target_scale, feature_scale, opts })
    }

    pub fn n_tasks(&self) -> usize {
        self.data.len()
    }

    pub fn target_scale(&self) -> &[f64] {
        &self.target_scale
    }

    fn row_weights(&self, cfg: &HyperConfig) -> Vec<f64> {
        if cfg.normalize {
            self.target_scale.iter().map(|s| 1.0 / (s * s)).collect()
        } else {
            vec![1.0; self.lib.d]
        }
    }

    /// Multiplier mapping optimizer coordinates to raw coefficients.
    fn coef_scale(&self, cfg: &HyperConfig) -> Vec<f64> {
        let (d, m) = (self.lib.d, self.lib.m());
        (0..d * m)
            .map(|idx| if cfg.normalize { self.target_scale[idx / m] / self.feature_scale[idx % m] } else { 1.0 })
            .collect()
    }

    /// Minibatch optimization of all parameters from the open-gate start;
    /// deterministic given `seed`.
    pub fn fit(&self, cfg: &HyperConfig, seed: u64) -> Result<(MetaModel, TrainReport)> {
        let start = MetaModel::new(self.lib.clone(), self.state_names.clone(), cfg.logit_init);
        self.fit_from(&start, cfg, seed)
    }

    /// As [`Trainer::fit`], starting from the logits and shared parameters
    /// of `init` (coefficients still start at zero).
    pub fn fit_from(&self, init: &MetaModel, cfg: &HyperConfig, seed: u64) -> Result<(MetaModel, TrainReport)> {
        cfg.validate()?;
        if init.lib != self.lib {
            return Err(Error::Dimension("initial model uses a different library".into()));
        }
        let start = Instant::now();
        let (d, m) = (self.lib.d, self.lib.m());
        let dm = d * m;
        let n_tasks = self.data.len();
        let mut model = init.clone();
        model.train_weights.clear();
        model.selection = None;
        let row_w = self.row_weights(cfg);
        let scale = self.coef_scale(cfg);
        let mut logits: Vec<f64> = model.gate_logits.0.iter().flatten().copied().collect();
        let mut u = vec![vec![0.0; dm]; n_tasks];
        let mut opt_logits = Adam::new(dm);
        let mut opt_xi = Adam::new(self.lib.n_xi);
        let mut opt_w = vec![Adam::new(dm); n_tasks];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n_tasks).collect();
        let mut report = TrainReport {
            total_loss: Vec::with_capacity(cfg.epochs),
            mean_risk: Vec::with_capacity(cfg.epochs),
            l1: Vec::with_capacity(cfg.epochs),
            vrex: Vec::with_capacity(cfg.epochs),
            val_loss: None,
            n_active: 0,
            wall_time_s: 0.0,
        };
        let raw = |u: &[f64]| -> Vec<f64> { u.iter().zip(&scale).map(|(a, b)| a * b).collect() };

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let epoch_mean = match cfg.vrex_scope {
                VrexScope::Epoch if cfg.lambda_rex > 0.0 && n_tasks > 0 => {
                    let gate: Vec<f64> = logits.iter().map(|&l| if gate_open(l) { 1.0 } else { 0.0 }).collect();
                    let risks: Vec<f64> = (0..n_tasks)
                        .into_par_iter()
                        .map(|i| {
                            risk_and_grad(&self.lib, &model.xi, &gate, &raw(&u[i]), &self.data[i], &row_w, false).risk
                        })
                        .collect();
                    Some(risks.iter().sum::<f64>() / n_tasks as f64)
                }
                _ => None,
            };
            let (mut sum_total, mut sum_risk, mut sum_l1, mut sum_vrex, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for batch in order.chunks(cfg.batch_tasks) {
                let gate: Vec<f64> = logits.iter().map(|&l| if gate_open(l) { 1.0 } else { 0.0 }).collect();
                let parts: Vec<RiskGrad> = batch
                    .par_iter()
                    .map(|&i| risk_and_grad(&self.lib, &model.xi, &gate, &raw(&u[i]), &self.data[i], &row_w, true))
                    .collect();
                let b = batch.len() as f64;
                let risks: Vec<f64> = parts.iter().map(|p| p.risk).collect();
                let mean = risks.iter().sum::<f64>() / b;
                let center = epoch_mean.unwrap_or(mean);
                let var = risks.iter().map(|r| (r - center).powi(2)).sum::<f64>() / b;
                let l1 = match cfg.l1_routing {
                    L1Routing::Binarized => gate.iter().sum::<f64>(),
                    L1Routing::Soft => logits.iter().map(|&l| sigmoid(l)).sum::<f64>(),
                };
                let total = mean + cfg.lambda_phi * l1 + cfg.lambda_rex * var;
                if !total.is_finite() {
                    return Err(Error::FailedConfig(format!("non-finite loss at epoch {epoch}")));
                }
                sum_total += total;
                sum_risk += mean;
                sum_l1 += cfg.lambda_phi * l1;
                sum_vrex += cfg.lambda_rex * var;
                batches += 1;

                let mut g_gate = vec![cfg.lambda_phi; dm];
                let mut g_xi = vec![0.0; self.lib.n_xi];
                for ((p, &i), r) in parts.iter().zip(batch).zip(&risks) {
                    let c = 1.0 / b + cfg.lambda_rex * 2.0 * (r - center) / b;
                    g_gate.iter_mut().zip(&p.gate).for_each(|(a, g)| *a += c * g);
                    g_xi.iter_mut().zip(&p.xi).for_each(|(a, g)| *a += c * g);
                    let g_u: Vec<f64> = p.w.iter().zip(&scale).map(|(g, s)| c * g * s).collect();
                    opt_w[i].step(&mut u[i], &g_u, cfg.eta, cfg.optimizer);
                }
                if cfg.train_gates {
                    g_gate.iter_mut().zip(&logits).for_each(|(g, l)| *g *= sigmoid_prime(*l));
                    opt_logits.step(&mut logits, &g_gate, cfg.eta, cfg.optimizer);
                }
                if cfg.train_xi {
                    opt_xi.step(&mut model.xi.0, &g_xi, cfg.eta, cfg.optimizer);
                }
            }
            let nb = batches.max(1) as f64;
            report.total_loss.push(sum_total / nb);
            report.mean_risk.push(sum_risk / nb);
            report.l1.push(sum_l1 / nb);
            report.vrex.push(sum_vrex / nb);
        }
        if logits.iter().chain(&model.xi.0).any(|v| !v.is_finite()) {
            return Err(Error::FailedConfig("non-finite parameters".into()));
        }
        model.gate_logits = GateLogits(unflat(&logits, d, m));
        let refined = if cfg.train_xi && cfg.xi_refine_iters > 0 {
            self.refine_xi(&mut model, &row_w, cfg.xi_refine_iters)
        } else {
            None
        };
        model.train_weights =
            refined.unwrap_or_else(|| u.iter().map(|ui| TaskWeights(unflat(&raw(ui), d, m))).collect());
        report.n_active = model.gates().n_active();
        report.wall_time_s = start.elapsed().as_secs_f64();
        Ok((model, report))
    }

    /// Training risk at the shared parameters of `model` with every task's
    /// coefficients solved by least squares, and those coefficients.
    fn profile_risk(&self, model: &MetaModel, gate: &[f64], row_w: &[f64]) -> Option<(f64, Vec<TaskWeights>)> {
        let d = self.lib.d;
        let fits: Vec<Option<(f64, TaskWeights)>> = self
            .data
            .par_iter()
            .map(|t| {
                let states: Vec<Vec<f64>> = t.states.chunks(d).map(|c| c.to_vec()).collect();
                let targets: Vec<Vec<f64>> = t.targets.chunks(d).map(|c| c.to_vec()).collect();
                let w = fit_weights_ls(model, &states, &targets, 0.0).ok()?;
                let r = risk_and_grad(&self.lib, &model.xi, gate, &flat(&w), t, row_w, false).risk;
                r.is_finite().then_some((r, w))
            })
            .collect();
        let fits: Vec<(f64, TaskWeights)> = fits.into_iter().collect::<Option<_>>()?;
        let mean = fits.iter().map(|f| f.0).sum::<f64>() / fits.len().max(1) as f64;
        Some((mean, fits.into_iter().map(|f| f.1).collect()))
    }

    /// Damped Gauss–Newton on the shared parameters of the profiled risk,
    /// accepting only strict improvements. Returns the matching per-task
    /// coefficients, or `None` (model untouched) when the profile cannot be
    /// evaluated.
    fn refine_xi(&self, model: &mut MetaModel, row_w: &[f64], iters: usize) -> Option<Vec<TaskWeights>> {
        let q = self.lib.n_xi;
        if q == 0 || self.data.is_empty() {
            return None;
        }
        let gate = binary_gates(&model.gate_logits);
        let mut trial = model.clone();
        let (mut loss, mut weights) = self.profile_risk(model, &gate, row_w)?;
        for _ in 0..iters {
            let parts: Vec<(Vec<f64>, Vec<f64>)> = self
                .data
                .par_iter()
                .zip(&weights)
                .map(|(t, w)| xi_normal_equations(&self.lib, &model.xi, &gate, &flat(w), t, row_w))
                .collect();
            let inv = 1.0 / parts.len() as f64;
            let mut grad = vec![0.0; q];
            let mut mat = DMatrix::<f64>::zeros(q, q);
            for (g, h) in &parts {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += inv * b);
                for (idx, v) in h.iter().enumerate() {
                    mat[(idx / q, idx % q)] += inv * v;
                }
            }
            let Some(dir) = damped_gauss_newton(&mat, &grad) else { break };
            let mut accepted = None;
            let mut scale = 1.0;
            for _ in 0..=20 {
                trial.xi.0.iter_mut().zip(&model.xi.0).zip(&dir).for_each(|((t, x), g)| *t = x + scale * g);
                if let Some((l, w)) = self.profile_risk(&trial, &gate, row_w) {
                    if l < loss {
                        accepted = Some((l, w));
                        break;
                    }
                }
                scale *= 0.5;
            }
            let Some((l, w)) = accepted else { break };
            let rel = (loss - l) / loss.max(f64::MIN_POSITIVE);
            model.xi = trial.xi.clone();
            loss = l;
            weights = w;
            if rel < 1e-10 {
                break;
            }
        }
        Some(weights)
    }

    /// Mean derivative risk on `val` (error weights from this trainer) with
    /// every task's coefficients re-fitted by least squares on its prefix.
    pub fn validation_loss(&self, model: &MetaModel, val: &Dataset, cfg: &HyperConfig) -> Result<f64> {
        if val.tasks.is_empty() {
            return Err(Error::Invalid("empty validation set".into()));
        }
        let row_w = self.row_weights(cfg);
        let gate = binary_gates(&model.gate_logits);
        let risks: Vec<Result<f64>> = val
            .tasks
            .par_iter()
            .map(|task| {
                let data = TaskData::new(&task.trajectory, self.opts, &model.lib)?;
                let (prefix, _) = split_prefix(&task.trajectory, val.prefix_len)?;
                let targets = estimate_derivatives_with(&prefix, self.opts)?;
                let w = fit_weights_ls(model, &prefix.states, &targets, 0.0)?;
                Ok(risk_and_grad(&model.lib, &model.xi, &gate, &flat(&w), &data, &row_w, false).risk)
            })
            .collect();
        let risks: Vec<f64> = risks.into_iter().collect::<Result<_>>()?;
        let mean = risks.iter().sum::<f64>() / risks.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        Ok(mean)
    }
}

/// Hyperparameter grid; every combination is tried in lexicographic
/// `(lambda_phi, lambda_rex, eta)` order on top of `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambda_phi: Vec<f64>,
    pub lambda_rex: Vec<f64>,
    pub eta: Vec<f64>,
    pub base: HyperConfig,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambda_phi: vec![1e-4, 1e-3, 5e-3, 1e-2],
            lambda_rex: vec![0.0, 1e-3, 1e-2],
            eta: vec![1e-2, 1e-3, 1e-4],
            base: HyperConfig::default(),
        }
    }
}

impl SweepGrid {
    pub fn single(cfg: HyperConfig) -> Self {
        Self { lambda_phi: vec![cfg.lambda_phi], lambda_rex: vec![cfg.lambda_rex], eta: vec![cfg.eta], base: cfg }
    }

    pub fn configs(&self) -> Vec<HyperConfig> {
        let mut out = Vec::new();
        for &lambda_phi in &self.lambda_phi {
            for &lambda_rex in &self.lambda_rex {
                for &eta in &self.eta {
                    out.push(HyperConfig { lambda_phi, lambda_rex, eta, ..self.base.clone() });
                }
            }
        }
        out
    }
}

/// Index of the sparsest candidate whose loss is within 5% of the best;
/// ties go to the lower loss, then to the earlier candidate. Candidates
/// are `(val_loss, n_active)`, `None` marks a failed configuration.
pub fn select_config(candidates: &[Option<(f64, usize)>]) -> Option<usize> {
    let best = candidates.iter().flatten().map(|c| c.0).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let mut chosen: Option<(usize, f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some((loss, active)) = *c else { continue };
        if loss > 1.05 * best {
            continue;
        }
        let better = match chosen {
            None => true,
            Some((_, l, a)) => active < a || (active == a && loss < l),
        };
        if better {
            chosen = Some((i, loss, active));
        }
    }
    chosen.map(|c| c.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: HyperConfig,
    pub val_loss: Option<f64>,
    pub n_active: Option<usize>,
    pub error: Option<String>,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub entries: Vec<SweepEntry>,
    pub selected: usize,
}

/// Fit and score every grid point, in grid order. Failed configurations
/// keep their error and have no model.
pub fn sweep_all(
    train: &Dataset,
    val: &Dataset,
    lib: &BasisLibrary,
    grid: &SweepGrid,
    seed: u64,
) -> Result<(Vec<SweepEntry>, Vec<Option<MetaModel>>)> {
    let configs = grid.configs();
    if configs.is_empty() {
        return Err(Error::Invalid("empty sweep grid".into()));
    }
    let trainer = Trainer::new(train, lib.clone(), grid.base.smooth_derivatives)?;
    let runs: Vec<(SweepEntry, Option<MetaModel>)> = configs
        .into_par_iter()
        .map(|cfg| {
            let fitted = trainer
                .fit(&cfg, seed)
                .and_then(|(model, report)| trainer.validation_loss(&model, val, &cfg).map(|v| (model, report, v)));
            match fitted {
                Ok((model, mut report, v)) => {
                    report.val_loss = Some(v);
                    let entry = SweepEntry {
                        config: cfg,
                        val_loss: Some(v),
                        n_active: Some(report.n_active),
                        error: None,
                        report: Some(report),
                    };
                    (entry, Some(model))
                }
                Err(e) => (
                    SweepEntry {
                        config: cfg,
                        val_loss: None,
                        n_active: None,
                        error: Some(e.to_string()),
                        report: None,
                    },
                    None,
                ),
            }
        })
        .collect();
    Ok(runs.into_iter().unzip())
}

/// Fit every grid point on `train`, score it on `val` and keep the model
/// picked by [`select_config`].
pub fn sweep_and_select(
    train: &Dataset,
    val: &Dataset,
    lib: &BasisLibrary,
    grid: &SweepGrid,
    seed: u64,
) -> Result<(MetaModel, SweepOutcome)> {
    let (entries, models) = sweep_all(train, val, lib, grid, seed)?;
    select_from(entries, models)
}

/// Apply [`select_config`] to the output of [`sweep_all`].
pub fn select_from(entries: Vec<SweepEntry>, mut models: Vec<Option<MetaModel>>) -> Result<(MetaModel, SweepOutcome)> {
    let candidates: Vec<Option<(f64, usize)>> = entries.iter().map(|e| e.val_loss.zip(e.n_active)).collect();
    let selected = select_config(&candidates).ok_or(Error::AllConfigsFailed)?;
    let mut model = models.swap_remove(selected).expect("selected config has a model");
    let e = &entries[selected];
    model.selection = Some(SelectionRecord {
        config: e.config.clone(),
        val_loss: e.val_loss.expect("selected config has a loss"),
        n_active: e.n_active.expect("selected config has a gate count"),
    });
    Ok((model, SweepOutcome { entries, selected }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gates;
    use crate::ode_sim::TimeGrid;
    use crate::systems::{generate, Split, SystemKind};
    use rand::Rng;

    fn pendulum_data(n: usize, seed: u64, noise: f64) -> Dataset {
        let kind = SystemKind::Pendulum;
        generate(&kind.spec(), &kind.environment(Split::Id), n, &kind.default_grid(), noise, seed).unwrap()
    }

    fn pendulum_truth(task: &TaskRecord) -> (MetaModel, TaskWeights) {
        let g = Gates::from_support(2, 8, &[&[2], &[6, 2]]);
        let model = MetaModel::with_gates(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), &g);
        let (alpha, rho) = (task.true_params[0], task.true_params[1]);
        let mut w = TaskWeights::zeros(2, 8);
        w.0[0][2] = 1.0;
        w.0[1][6] = -alpha * alpha;
        w.0[1][2] = -rho;
        (model, w)
    }

    #[test]
    fn vrex_values() {
        let r = |v: &[f64]| v.iter().enumerate().map(|(i, &value)| TaskRisk { task_id: i, value }).collect::<Vec<_>>();
        assert_eq!(vrex_penalty(&r(&[1.0, 1.0, 1.0])), 0.0);
        assert_eq!(vrex_penalty(&r(&[0.0, 2.0])), 1.0);
        assert_eq!(vrex_penalty(&r(&[3.7])), 0.0);
    }

    #[test]
    fn true_parameters_reach_difference_floor() {
        let data = pendulum_data(5, 1, 0.0);
        for task in &data.tasks {
            let (model, w) = pendulum_truth(task);
            let r = task_risk(&model, &w, task).unwrap();
            assert!(r.value < 1e-3, "risk {}", r.value);
        }
    }

    #[test]
    fn zero_model_on_constant_trajectory() {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let mut task = pendulum_data(1, 2, 0.0).tasks.remove(0);
        task.trajectory = Trajectory::new(grid, vec![vec![0.3, -0.2]; 11]).unwrap();
        let model = MetaModel::new(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), 0.5);
        let r = task_risk(&model, &TaskWeights::zeros(2, 8), &task).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn l1_term_counts_open_gates() {
        let data = pendulum_data(2, 3, 0.0);
        let model = MetaModel::new(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), 0.5);
        let cfg = HyperConfig { lambda_phi: 1e-2, ..HyperConfig::default() };
        let w = vec![TaskWeights::zeros(2, 8); 2];
        let (loss, _) = total_loss(&model, &w, &data.observations(), &cfg).unwrap();
        assert!((loss.l1 - 1e-2 * 16.0).abs() < 1e-15);
    }

    #[test]
    fn weight_gradient_vanishes_at_least_squares_optimum() {
        let data = pendulum_data(1, 4, 0.0);
        let (model, _) = pendulum_truth(&data.tasks[0]);
        let traj = &data.tasks[0].trajectory;
        let targets = crate::ode_sim::estimate_derivatives(traj).unwrap();
        let w = fit_weights_ls(&model, &traj.states, &targets, 0.0).unwrap();
        let cfg = HyperConfig { lambda_phi: 0.0, lambda_rex: 0.0, ..HyperConfig::default() };
        let (loss, grads) = total_loss(&model, &[w], &data.observations(), &cfg).unwrap();
        assert!(loss.total < 1e-3);
        let g = model.gates();
        for j in 0..2 {
            for k in g.support(j) {
                assert!(grads.weights[0].0[j][k].abs() < 1e-6, "{}", grads.weights[0].0[j][k]);
            }
        }
    }

    fn random_setup(rng: &mut ChaCha8Rng, lib: &BasisLibrary, n_tasks: usize) -> (MetaModel, Vec<TaskWeights>) {
        let mut model = MetaModel::new(lib.clone(), (0..lib.d).map(|j| format!("x{j}")).collect(), 0.0);
        for l in model.gate_logits.0.iter_mut().flatten() {
            // keep clear of the threshold
            let mag = rng.gen_range(1e-2..2.0);
            *l = if rng.gen_bool(0.6) { mag } else { -mag };
        }
        for v in model.xi.0.iter_mut() {
            *v = rng.gen_range(-1.2..1.2);
        }
        let w = (0..n_tasks)
            .map(|_| {
                TaskWeights((0..lib.d).map(|_| (0..lib.m()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            })
            .collect();
        (model, w)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Five-point central difference of `f` at offset 0.
    fn fd5(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    }

    /// Central differences of the objective against every analytic entry.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = pendulum_data(3, 5, 0.01);
        let trajs = data.observations();
        let lib = BasisLibrary::standard(2);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (model, w) = random_setup(&mut rng, &lib, trajs.len());
            let cfg = HyperConfig {
                lambda_phi: rng.gen_range(0.0..1e-2),
                lambda_rex: rng.gen_range(0.0..1.0),
                ..HyperConfig::default()
            };
            let (_, g) = total_loss(&model, &w, &trajs, &cfg).unwrap();
            let f = |m: &MetaModel, w: &[TaskWeights]| total_loss(m, w, &trajs, &cfg).unwrap().0.total;
            for t in 0..w.len() {
                for j in 0..2 {
                    for k in 0..8 {
                        let fd = fd5(
                            |e| {
                                let mut v = w.clone();
                                v[t].0[j][k] += e;
                                f(&model, &v)
                            },
                            h,
                        );
                        if g.weights[t].0[j][k] == 0.0 {
                            assert!(fd.abs() < 1e-9);
                        } else {
                            worst = worst.max(rel_err(g.weights[t].0[j][k], fd));
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
            // straight-through: finite differences in the gate value, times σ'(logit)
            let gate0: Vec<Vec<f64>> =
                model.gates().0.iter().map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).collect();
            for j in 0..2 {
                for k in 0..8 {
                    let fd = fd5(
                        |e| {
                            let mut gv = gate0.clone();
                            gv[j][k] += e;
                            total_loss_relaxed(&model, &gv, &w, &trajs, &cfg).unwrap().0.total
                        },
                        h,
                    );
                    worst = worst.max(rel_err(g.gates[j][k], fd * sigmoid_prime(model.gate_logits.0[j][k])));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_config(&[Some((1.0, 5)), Some((1.04, 3))]), Some(1));
        assert_eq!(select_config(&[Some((1.0, 5)), Some((1.06, 3))]), Some(0));
        assert_eq!(select_config(&[Some((2.0, 4))]), Some(0));
        assert_eq!(select_config(&[Some((1.0, 3)), Some((1.01, 3)), Some((0.99, 3))]), Some(2));
        assert_eq!(select_config(&[Some((1.0, 3)), Some((1.0, 3))]), Some(0));
        assert_eq!(select_config(&[None, Some((1.0, 3))]), Some(1));
        assert_eq!(select_config(&[None, None]), None);
    }

    #[test]
    fn grid_order_is_lexicographic() {
        let grid = SweepGrid::default();
        let c = grid.configs();
        assert_eq!(c.len(), 36);
        assert_eq!((c[0].lambda_phi, c[0].lambda_rex, c[0].eta), (1e-4, 0.0, 1e-2));
        assert_eq!((c[1].lambda_phi, c[1].lambda_rex, c[1].eta), (1e-4, 0.0, 1e-3));
        assert_eq!((c[35].lambda_phi, c[35].lambda_rex, c[35].eta), (1e-2, 1e-2, 1e-4));
    }

    #[test]
    fn huge_sparsity_weight_closes_everything() {
        let data = pendulum_data(20, 6, 0.0);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let cfg = HyperConfig { lambda_phi: 1e3, epochs: 100, batch_tasks: 8, ..HyperConfig::default() };
        let (model, report) = trainer.fit(&cfg, 1).unwrap();
        assert_eq!(model.gates().n_active(), 0);
        assert_eq!(report.total_loss.len(), 100);
    }

    #[test]
    fn identical_tasks_get_identical_weights() {
        let mut data = pendulum_data(1, 7, 0.0);
        let mut twin = data.tasks[0].clone();
        twin.task_id = 1;
        data.tasks.push(twin);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let cfg = HyperConfig { epochs: 50, ..HyperConfig::default() };
        let (model, _) = trainer.fit(&cfg, 3).unwrap();
        for (a, b) in model.train_weights[0].0.iter().flatten().zip(model.train_weights[1].0.iter().flatten()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = pendulum_data(30, 8, 0.01);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let cfg = HyperConfig { epochs: 20, batch_tasks: 8, lambda_rex: 1e-2, ..HyperConfig::default() };
        let (m1, r1) = trainer.fit(&cfg, 9).unwrap();
        let (m2, r2) = trainer.fit(&cfg, 9).unwrap();
        assert_eq!(r1.total_loss, r2.total_loss);
        assert_eq!(m1, m2);
        let (_, r3) = trainer.fit(&cfg, 10).unwrap();
        assert_ne!(r1.total_loss, r3.total_loss);
    }

    #[test]
    fn weight_only_training_decreases_loss() {
        let data = pendulum_data(1, 11, 0.0);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let truth = Gates::from_support(2, 8, &[&[2], &[6, 2]]);
        // start from the true structure: logits ±1 match `truth`
        let mut trainer_model =
            MetaModel::with_gates(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), &truth);
        trainer_model.selection = None;
        let cfg =
            HyperConfig { lambda_phi: 0.0, epochs: 300, train_gates: false, train_xi: false, ..HyperConfig::default() };
        let (_, report) = trainer.fit_from(&trainer_model, &cfg, 1).unwrap();
        for e in 5..report.total_loss.len() - 1 {
            assert!(
                report.total_loss[e + 1] <= report.total_loss[e] * (1.0 + 1e-12),
                "epoch {e}: {:?}",
                &report.total_loss[e..e + 2]
            );
        }
    }

    #[test]
    fn confident_gates_do_not_flip() {
        let data = pendulum_data(10, 12, 0.0);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let cfg = HyperConfig { lambda_phi: 0.0, epochs: 1, batch_tasks: 4, ..HyperConfig::default() };
        let truth = Gates::from_support(2, 8, &[&[2], &[6, 2]]);
        let mut start = MetaModel::with_gates(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), &truth);
        for l in start.gate_logits.0.iter_mut().flatten() {
            *l *= 4.0;
        }
        let (after, _) = trainer.fit_from(&start, &cfg, 2).unwrap();
        assert_eq!(after.gates(), truth);
    }

    #[test]
    fn shared_parameter_refinement_recovers_the_sine_scale() {
        let data = pendulum_data(20, 13, 0.0);
        let trainer = Trainer::new(&data, BasisLibrary::standard(2), false).unwrap();
        let truth = Gates::from_support(2, 8, &[&[2], &[6, 2]]);
        let mut start = MetaModel::with_gates(BasisLibrary::standard(2), SystemKind::Pendulum.state_names(), &truth);
        start.xi.0[0] = 1.08;
        start.xi.0[1] = -0.05;
        let cfg = HyperConfig { eta: 0.0, epochs: 1, train_gates: false, ..HyperConfig::default() };
        let (refined, _) = trainer.fit_from(&start, &cfg, 0).unwrap();
        // a minimum of the risk with coefficients re-solved, near the truth up
        // to the finite-difference bias of the targets
        let (gate, row_w) = (binary_gates(&refined.gate_logits), trainer.row_weights(&cfg));
        let at = |m: &MetaModel| trainer.profile_risk(m, &gate, &row_w).unwrap().0;
        let best = at(&refined);
        for (slot, h) in [(0, 1e-3), (0, -1e-3), (1, 1e-3), (1, -1e-3)] {
            let mut m = refined.clone();
            m.xi.0[slot] += h;
            assert!(at(&m) > best);
        }
        assert!((refined.xi.0[0] - 1.0).abs() < 5e-3, "{:?}", refined.xi);
        assert!(refined.xi.0[1].abs() < 5e-3, "{:?}", refined.xi);
        // coefficients are the least-squares fits at the refined parameters
        let (_, w) = pendulum_truth(&data.tasks[0]);
        assert!((refined.train_weights[0].0[1][6] - w.0[1][6]).abs() < 1e-2 * w.0[1][6].abs());
        let (kept, _) = trainer.fit_from(&start, &HyperConfig { xi_refine_iters: 0, ..cfg }, 0).unwrap();
        assert_eq!(kept.xi, start.xi);
    }
}
