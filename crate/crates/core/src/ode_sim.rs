//! Fixed-step and adaptive Runge–Kutta integration of autonomous vector fields.
//!
//! The fixed-step integrator takes `n_sub` classical RK4 substeps per grid
//! interval and checks every accepted state against a [`DivergenceGuard`].
//! A blown-up rollout is reported as [`Error::Diverged`], never as a
//! trajectory holding non-finite values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularly spaced sample times `t_l = t0 + l * dt`, `l = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::Invalid(format!("time grid needs finite t0 and dt > 0 (dt={dt})")));
        }
        Ok(Self { t0, dt, n_steps })
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, l: usize) -> f64 {
        self.t0 + l as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_points()).map(|l| self.time(l)).collect()
    }

    /// Grid starting at sample `offset` of `self`, covering `n_steps` intervals.
    pub fn shifted(&self, offset: usize, n_steps: usize) -> TimeGrid {
        TimeGrid { t0: self.time(offset), dt: self.dt, n_steps }
    }
}

/// A sampled state sequence; `states[l]` is the state at `grid.time(l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != grid.n_points() {
            return Err(Error::Dimension(format!(
                "trajectory has {} rows, grid expects {}",
                states.len(),
                grid.n_points()
            )));
        }
        let d = states.first().map_or(0, Vec::len);
        if states.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged trajectory rows".into()));
        }
        Ok(Self { grid, states })
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[j]).collect()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory always has at least one row")
    }
}

/// Right-hand side of an autonomous ODE `dx/dt = f(x)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Limits applied while integrating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceGuard {
    /// Largest allowed absolute state component.
    pub max_norm: f64,
    /// RK4 substeps per grid interval.
    pub n_sub: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self { max_norm: 1e8, n_sub: 10 }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Scratch buffers for repeated RK4 steps.
pub(crate) struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub(crate) fn new(d: usize) -> Self {
        Self { k1: vec![0.0; d], k2: vec![0.0; d], k3: vec![0.0; d], k4: vec![0.0; d], tmp: vec![0.0; d] }
    }
}

pub(crate) fn rk4_step_in_place<V: VectorField + ?Sized>(field: &V, x: &mut [f64], h: f64, w: &mut Rk4Work) {
    let d = x.len();
    field.eval(x, &mut w.k1);
    for i in 0..d {
        w.tmp[i] = x[i] + 0.5 * h * w.k1[i];
    }
    field.eval(&w.tmp, &mut w.k2);
    for i in 0..d {
        w.tmp[i] = x[i] + 0.5 * h * w.k2[i];
    }
    field.eval(&w.tmp, &mut w.k3);
    for i in 0..d {
        w.tmp[i] = x[i] + h * w.k3[i];
    }
    field.eval(&w.tmp, &mut w.k4);
    for i in 0..d {
        x[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

/// One classical fourth-order Runge–Kutta step of size `h`.
pub fn rk4_step<V: VectorField + ?Sized>(field: &V, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    if x.len() != field.dim() {
        return Err(Error::Dimension(format!("state has {} entries, field expects {}", x.len(), field.dim())));
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("rk4 input state".into()));
    }
    let mut w = Rk4Work::new(x.len());
    let mut next = x.to_vec();
    rk4_step_in_place(field, &mut next, h, &mut w);
    let stages_ok = [&w.k1, &w.k2, &w.k3, &w.k4].iter().all(|k| all_finite(k));
    if !stages_ok || !all_finite(&next) {
        return Err(Error::NonFinite("rk4 stage or output".into()));
    }
    Ok(next)
}

/// Integrate `field` from `x0` over every point of `grid` using RK4 substeps.
///
/// Returns [`Error::Diverged`] carrying the last grid index whose state was
/// accepted when a state goes non-finite or exceeds `guard.max_norm`.
pub fn integrate<V: VectorField + ?Sized>(
    field: &V,
    x0: &[f64],
    grid: &TimeGrid,
    guard: &DivergenceGuard,
) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::Dimension(format!("x0 has {} entries, field expects {d}", x0.len())));
    }
    if !all_finite(x0) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let n_sub = guard.n_sub.max(1);
    let h = grid.dt / n_sub as f64;
    let mut w = Rk4Work::new(d);
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(grid.n_points());
    states.push(x.clone());
    for l in 0..grid.n_steps {
        for _ in 0..n_sub {
            rk4_step_in_place(field, &mut x, h, &mut w);
            if x.iter().any(|v| !v.is_finite() || v.abs() > guard.max_norm) {
                return Err(Error::Diverged { last_valid: l });
            }
        }
        states.push(x.clone());
    }
    Ok(Trajectory { grid: *grid, states })
}

/// Settings for the embedded Runge–Kutta–Fehlberg 4(5) integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_substeps: usize,
    pub max_norm: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { rtol: 1e-9, atol: 1e-12, max_substeps: 1_000_000, max_norm: 1e8 }
    }
}

// Fehlberg tableau.
const RKF_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 4.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const RKF_B5: [f64; 6] = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
const RKF_B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0];

/// Adaptive RKF45 integration sampled on `grid`; used to cross-check the
/// fixed-step integrator.
pub fn integrate_adaptive<V: VectorField + ?Sized>(
    field: &V,
    x0: &[f64],
    grid: &TimeGrid,
    cfg: &AdaptiveConfig,
) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::Dimension(format!("x0 has {} entries, field expects {d}", x0.len())));
    }
    if !all_finite(x0) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let mut k = vec![vec![0.0; d]; 6];
    let mut tmp = vec![0.0; d];
    let mut x = x0.to_vec();
    let mut states = vec![x.clone()];
    let mut h = grid.dt / 10.0;
    let mut substeps = 0usize;
    for l in 0..grid.n_steps {
        let mut remaining = grid.dt;
        while remaining > 1e-15 * grid.dt {
            let step = h.min(remaining);
            for s in 0..6 {
                for i in 0..d {
                    tmp[i] = x[i] + step * (0..s).map(|r| RKF_A[s][r] * k[r][i]).sum::<f64>();
                }
                field.eval(&tmp, &mut k[s]);
            }
            let mut err: f64 = 0.0;
            let mut x5 = vec![0.0; d];
            for i in 0..d {
                let hi: f64 = (0..6).map(|s| RKF_B5[s] * k[s][i]).sum();
                let lo: f64 = (0..6).map(|s| RKF_B4[s] * k[s][i]).sum();
                x5[i] = x[i] + step * hi;
                let scale = cfg.atol + cfg.rtol * x[i].abs().max(x5[i].abs());
                err = err.max((step * (hi - lo)).abs() / scale);
            }
            substeps += 1;
            if substeps > cfg.max_substeps || !err.is_finite() {
                return Err(Error::Diverged { last_valid: l });
            }
            if err <= 1.0 {
                x = x5;
                remaining -= step;
                if x.iter().any(|v| !v.is_finite() || v.abs() > cfg.max_norm) {
                    return Err(Error::Diverged { last_valid: l });
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
        }
        states.push(x.clone());
    }
    Ok(Trajectory { grid: *grid, states })
}

/// Options for derivative estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivativeOptions {
    /// Apply a centred 3-point moving average before differencing.
    pub smooth: bool,
}

/// Centred 3-point moving average; endpoints are kept as observed.
pub fn moving_average3(traj: &Trajectory) -> Trajectory {
    let n = traj.len();
    let mut states = traj.states.clone();
    for l in 1..n.saturating_sub(1) {
        for j in 0..traj.dim() {
            states[l][j] = (traj.states[l - 1][j] + traj.states[l][j] + traj.states[l + 1][j]) / 3.0;
        }
    }
    Trajectory { grid: traj.grid, states }
}

/// Finite-difference time derivatives: central differences in the interior,
/// first-order one-sided differences at both endpoints.
pub fn estimate_derivatives(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    estimate_derivatives_with(traj, DerivativeOptions::default())
}

pub fn estimate_derivatives_with(traj: &Trajectory, opts: DerivativeOptions) -> Result<Vec<Vec<f64>>> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::TooShort { need: 3, got: n });
    }
    let smoothed;
    let src = if opts.smooth {
        smoothed = moving_average3(traj);
        &smoothed
    } else {
        traj
    };
    let x = &src.states;
    let dt = src.grid.dt;
    let d = src.dim();
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        out[0][j] = (x[1][j] - x[0][j]) / dt;
        out[n - 1][j] = (x[n - 1][j] - x[n - 2][j]) / dt;
        for l in 1..n - 1 {
            out[l][j] = (x[l + 1][j] - x[l - 1][j]) / (2.0 * dt);
        }
    }
    Ok(out)
}
