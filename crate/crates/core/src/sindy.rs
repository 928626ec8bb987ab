//! Sparse regression baseline fitted on each test prefix alone, with the
//! shared dictionary at its untrained sine parameters.

use serde::{Deserialize, Serialize};

use crate::basis::BasisLibrary;
use crate::error::{Error, Result};
use crate::linalg::ridge_raw;
use crate::model::{rollout, Gates, MetaModel, TaskWeights};
use crate::ode_sim::{estimate_derivatives, TimeGrid, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlsConfig {
    pub threshold: f64,
    pub alpha: f64,
    pub max_iters: usize,
}

impl Default for StlsConfig {
    fn default() -> Self {
        Self { threshold: 0.1, alpha: 0.05, max_iters: 20 }
    }
}

impl StlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) || !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "threshold {} and ridge {} must be finite and >= 0",
                self.threshold, self.alpha
            )));
        }
        Ok(())
    }
}

/// Candidate settings scored per task by prefix reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SindyGrid {
    pub thresholds: Vec<f64>,
    pub alphas: Vec<f64>,
    pub max_iters: usize,
}

impl Default for SindyGrid {
    fn default() -> Self {
        Self { thresholds: vec![0.005, 0.01, 0.05, 0.1, 0.2, 0.5], alphas: vec![0.05, 0.01, 0.1, 0.5], max_iters: 20 }
    }
}

impl SindyGrid {
    /// Threshold-major order.
    pub fn configs(&self) -> Vec<StlsConfig> {
        self.thresholds
            .iter()
            .flat_map(|&threshold| {
                self.alphas.iter().map(move |&alpha| StlsConfig { threshold, alpha, max_iters: self.max_iters })
            })
            .collect()
    }
}

/// Coefficients plus the active-set size of every target after each pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StlsTrace {
    pub coefficients: Vec<Vec<f64>>,
    pub active_sizes: Vec<Vec<usize>>,
}

/// Sequentially thresholded ridge regression of each target column.
/// `features` is `n x m`, `targets` is `n x d`; returns `d x m`.
pub fn stls_fit(features: &[Vec<f64>], targets: &[Vec<f64>], cfg: &StlsConfig) -> Result<Vec<Vec<f64>>> {
    stls_fit_traced(features, targets, cfg).map(|t| t.coefficients)
}

pub fn stls_fit_traced(features: &[Vec<f64>], targets: &[Vec<f64>], cfg: &StlsConfig) -> Result<StlsTrace> {
    cfg.validate()?;
    let n = features.len();
    if n == 0 {
        return Err(Error::TooShort { need: 1, got: 0 });
    }
    if targets.len() != n {
        return Err(Error::Dimension(format!("{n} feature rows, {} target rows", targets.len())));
    }
    let m = features[0].len();
    let d = targets[0].len();
    let mut coefficients = vec![vec![0.0; m]; d];
    let mut active_sizes = vec![Vec::new(); d];
    for j in 0..d {
        let b: Vec<f64> = targets.iter().map(|r| r[j]).collect();
        let mut active: Vec<usize> = (0..m).collect();
        let mut coef = vec![0.0; m];
        for _ in 0..cfg.max_iters.max(1) {
            coef.iter_mut().for_each(|c| *c = 0.0);
            if active.is_empty() {
                active_sizes[j].push(0);
                break;
            }
            let p = active.len();
            let a: Vec<f64> = features.iter().flat_map(|row| active.iter().map(move |&k| row[k])).collect();
            let sol = ridge_raw(&a, &b, n, p, cfg.alpha)?;
            for (&k, v) in active.iter().zip(&sol) {
                coef[k] = *v;
            }
            let kept: Vec<usize> = active.iter().copied().filter(|&k| coef[k].abs() >= cfg.threshold).collect();
            for &k in &active {
                if coef[k].abs() < cfg.threshold {
                    coef[k] = 0.0;
                }
            }
            active_sizes[j].push(kept.len());
            if kept.len() == active.len() {
                break;
            }
            active = kept;
        }
        coefficients[j] = coef;
    }
    Ok(StlsTrace { coefficients, active_sizes })
}

/// Model whose gates are the nonzero coefficients, at the untrained `xi`.
fn coefficient_model(lib: &BasisLibrary, coef: &[Vec<f64>]) -> (MetaModel, TaskWeights) {
    let d = coef.len();
    let gates = Gates(coef.iter().map(|row| row.iter().map(|c| *c != 0.0).collect()).collect());
    let names = (1..=d).map(|i| format!("x{i}")).collect();
    let model = MetaModel::with_gates(lib.clone(), names, &gates);
    (model, TaskWeights(coef.to_vec()))
}

fn fit_prefix(prefix: &Trajectory, lib: &BasisLibrary, cfg: &StlsConfig) -> Result<(MetaModel, TaskWeights)> {
    let xi = lib.default_xi();
    let features: Vec<Vec<f64>> = prefix.states.iter().map(|x| lib.eval(&xi, x)).collect();
    let targets = estimate_derivatives(prefix)?;
    let coef = stls_fit(&features, &targets, cfg)?;
    Ok(coefficient_model(lib, &coef))
}

/// Fit on the prefix and roll out from its last state over `horizon`.
pub fn sindy_forecast(
    prefix: &Trajectory,
    horizon: &TimeGrid,
    lib: &BasisLibrary,
    cfg: &StlsConfig,
) -> Result<Trajectory> {
    if prefix.is_empty() {
        return Err(Error::TooShort { need: 2, got: 0 });
    }
    let (model, w) = fit_prefix(prefix, lib, cfg)?;
    rollout(&model, &w, prefix.last(), horizon)
}

/// Standardised squared error of a rollout from the first prefix state.
fn prefix_reconstruction(model: &MetaModel, w: &TaskWeights, prefix: &Trajectory) -> Option<f64> {
    let rec = rollout(model, w, &prefix.states[0], &prefix.grid).ok()?;
    let mut acc = 0.0;
    for j in 0..prefix.dim() {
        let col = prefix.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        let c = if var > 0.0 { 1.0 / var } else { 1.0 };
        acc += c * rec.states.iter().zip(&col).map(|(r, o)| (r[j] - o).powi(2)).sum::<f64>();
    }
    acc.is_finite().then_some(acc)
}

/// Pick the grid setting with the lowest prefix reconstruction error
/// (earliest wins ties); `Diverged` if every setting blows up on the prefix.
pub fn select_stls(prefix: &Trajectory, lib: &BasisLibrary, grid: &SindyGrid) -> Result<StlsConfig> {
    let mut best: Option<(f64, StlsConfig)> = None;
    for cfg in grid.configs() {
        let Ok((model, w)) = fit_prefix(prefix, lib, &cfg) else { continue };
        if let Some(err) = prefix_reconstruction(&model, &w, prefix) {
            if best.map_or(true, |(b, _)| err < b) {
                best = Some((err, cfg));
            }
        }
    }
    best.map(|(_, c)| c).ok_or(Error::Diverged { last_valid: 0 })
}

/// Per-task selection followed by the forecast.
pub fn sindy_forecast_selected(
    prefix: &Trajectory,
    horizon: &TimeGrid,
    lib: &BasisLibrary,
    grid: &SindyGrid,
) -> Result<Trajectory> {
    let cfg = select_stls(prefix, lib, grid)?;
    sindy_forecast(prefix, horizon, lib, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn exact_single_column_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_design(&mut rng, 50, 6);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![3.0 * r[0]]).collect();
        let c = stls_fit(&x, &y, &StlsConfig { threshold: 0.1, alpha: 0.0, max_iters: 20 }).unwrap();
        assert!((c[0][0] - 3.0).abs() < 1e-10);
        assert!(c[0][1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn huge_threshold_gives_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_design(&mut rng, 30, 4);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] - 2.0 * r[3], r[1]]).collect();
        let c = stls_fit(&x, &y, &StlsConfig { threshold: 100.0, alpha: 0.0, max_iters: 20 }).unwrap();
        assert!(c.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn no_threshold_no_ridge_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = random_design(&mut rng, 40, 5);
            let y: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let c = stls_fit(&x, &y, &StlsConfig { threshold: 0.0, alpha: 0.0, max_iters: 20 }).unwrap();
            let a = DMatrix::from_fn(40, 5, |r, k| x[r][k]);
            let b = DVector::from_fn(40, |r, _| y[r][0]);
            let oracle = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * b));
            for k in 0..5 {
                assert!((c[0][k] - oracle[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_prefix_gives_constant_forecast() {
        let lib = BasisLibrary::standard(2);
        let grid = TimeGrid::new(0.0, 0.1, 33).unwrap();
        let prefix = Trajectory::new(grid, vec![vec![0.4, -1.0]; 34]).unwrap();
        let f = sindy_forecast(&prefix, &grid.shifted(33, 20), &lib, &StlsConfig::default()).unwrap();
        assert!(f.states.iter().all(|s| s == &vec![0.4, -1.0]));
    }

    #[test]
    fn long_clean_prefix_forecasts_accurately() {
        use crate::adapt::nrmse;
        use crate::systems::{generate, split_prefix, Split, SystemKind};
        let k = SystemKind::Pendulum;
        let long = TimeGrid::new(0.0, 0.1, 200).unwrap();
        let data = generate(&k.spec(), &k.environment(Split::OodX0), 5, &long, 0.0, 4).unwrap();
        let lib = BasisLibrary::standard(2);
        for task in &data.tasks {
            let (prefix, held) = split_prefix(&task.trajectory, 100).unwrap();
            let f = sindy_forecast_selected(&prefix, &long.shifted(100, 100), &lib, &SindyGrid::default()).unwrap();
            let pred = Trajectory { grid: held.grid, states: f.states[1..].to_vec() };
            let e = nrmse(&pred, &held).unwrap();
            assert!(e < 0.05, "{e}");
        }
    }

    proptest! {
        #[test]
        fn pruning_is_monotone_and_bounded(seed in 0u64..500, threshold in 0.0f64..1.0, alpha in 0.0f64..0.5, iters in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_design(&mut rng, 25, 7);
            let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 0.3 * r[4] + 0.05 * rng.gen_range(-1.0..1.0), -r[2]]).collect();
            let cfg = StlsConfig { threshold, alpha, max_iters: iters };
            let t = stls_fit_traced(&x, &y, &cfg).unwrap();
            for sizes in &t.active_sizes {
                prop_assert!(sizes.len() <= iters);
                prop_assert!(sizes.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(sizes[0] <= 7);
            }
            for row in &t.coefficients {
                prop_assert!(row.iter().all(|c| *c == 0.0 || c.abs() >= threshold));
            }
        }
    }
}
