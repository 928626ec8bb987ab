//! Gated dictionary model `dx/dt = (W ⊙ Φ) F(x; ξ)`.
//!
//! The structure gates `Φ` are binarized from real logits; the gradient
//! path for the logits lives in the trainer.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::basis::{fmt_num, BasisLibrary, GlobalParams};
use crate::error::{Error, Result};
use crate::linalg::normal_equations;
use crate::ode_sim::{integrate, DivergenceGuard, TimeGrid, Trajectory, VectorField};
use crate::trainer::HyperConfig;

/// Real-valued gate logits, `d x m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateLogits(pub Vec<Vec<f64>>);

/// Per-task coefficients, `d x m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskWeights(pub Vec<Vec<f64>>);

impl TaskWeights {
    pub fn zeros(d: usize, m: usize) -> Self {
        TaskWeights(vec![vec![0.0; m]; d])
    }
}

/// Binary structure mask, `d x m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gates(pub Vec<Vec<bool>>);

impl Gates {
    pub fn n_active(&self) -> usize {
        self.0.iter().flatten().filter(|g| **g).count()
    }

    /// Open columns of output row `j`.
    pub fn support(&self, j: usize) -> Vec<usize> {
        self.0[j].iter().enumerate().filter(|(_, g)| **g).map(|(k, _)| k).collect()
    }

    pub fn from_support(d: usize, m: usize, rows: &[&[usize]]) -> Self {
        let mut g = vec![vec![false; m]; d];
        for (j, cols) in rows.iter().enumerate() {
            for &k in cols.iter() {
                g[j][k] = true;
            }
        }
        Gates(g)
    }
}

/// Threshold a logit: open iff `sigmoid(logit) > 0.5`, i.e. `logit > 0`.
pub fn gate_open(logit: f64) -> bool {
    logit > 0.0
}

pub fn gates(logits: &GateLogits) -> Gates {
    Gates(logits.0.iter().map(|row| row.iter().map(|&l| gate_open(l)).collect()).collect())
}

/// How the selected configuration was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub config: HyperConfig,
    pub val_loss: f64,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub state_names: Vec<String>,
    pub lib: BasisLibrary,
    pub xi: GlobalParams,
    pub gate_logits: GateLogits,
    /// Fitted coefficients of the training tasks (diagnostics and the
    /// no-adaptation ablation only).
    pub train_weights: Vec<TaskWeights>,
    pub selection: Option<SelectionRecord>,
}

impl MetaModel {
    /// All gates open (logit `logit_init`), standard sine parameters.
    pub fn new(lib: BasisLibrary, state_names: Vec<String>, logit_init: f64) -> Self {
        let xi = lib.default_xi();
        let gate_logits = GateLogits(vec![vec![logit_init; lib.m()]; lib.d]);
        Self { state_names, lib, xi, gate_logits, train_weights: Vec::new(), selection: None }
    }

    /// Model whose gates are exactly `gates` (logits ±1).
    pub fn with_gates(lib: BasisLibrary, state_names: Vec<String>, gates: &Gates) -> Self {
        let mut model = Self::new(lib, state_names, -1.0);
        for (row, grow) in model.gate_logits.0.iter_mut().zip(&gates.0) {
            for (l, g) in row.iter_mut().zip(grow) {
                *l = if *g { 1.0 } else { -1.0 };
            }
        }
        model
    }

    pub fn d(&self) -> usize {
        self.lib.d
    }

    pub fn m(&self) -> usize {
        self.lib.m()
    }

    pub fn gates(&self) -> Gates {
        gates(&self.gate_logits)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.d(), self.m());
        let ok = self.state_names.len() == d
            && self.xi.len() == self.lib.n_xi
            && self.gate_logits.0.len() == d
            && self.gate_logits.0.iter().all(|r| r.len() == m)
            && self.train_weights.iter().all(|w| w.0.len() == d && w.0.iter().all(|r| r.len() == m));
        if !ok {
            return Err(Error::Dimension("model components disagree on d or m".into()));
        }
        if self.xi.0.iter().chain(self.gate_logits.0.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Mean of the training-task coefficients.
    pub fn mean_train_weights(&self) -> TaskWeights {
        let mut acc = TaskWeights::zeros(self.d(), self.m());
        if self.train_weights.is_empty() {
            return acc;
        }
        for w in &self.train_weights {
            for (a, r) in acc.0.iter_mut().zip(&w.0) {
                for (x, y) in a.iter_mut().zip(r) {
                    *x += y;
                }
            }
        }
        let n = self.train_weights.len() as f64;
        acc.0.iter_mut().flatten().for_each(|v| *v /= n);
        acc
    }

    /// The vector field `x -> (W ⊙ Φ) F(x; ξ)` for fixed task weights.
    pub fn field(&self, w: &TaskWeights) -> ModelField<'_> {
        let g = self.gates();
        let coef =
            w.0.iter()
                .zip(&g.0)
                .map(|(wr, gr)| wr.iter().zip(gr).map(|(w, g)| if *g { *w } else { 0.0 }).collect())
                .collect();
        ModelField { lib: &self.lib, xi: &self.xi, coef }
    }
}

thread_local! {
    static BASIS_BUF: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Gated model evaluated as an ODE right-hand side.
pub struct ModelField<'a> {
    lib: &'a BasisLibrary,
    xi: &'a GlobalParams,
    /// `W ⊙ Φ`, rows per output dimension.
    coef: Vec<Vec<f64>>,
}

impl ModelField<'_> {
    pub fn coef(&self) -> &[Vec<f64>] {
        &self.coef
    }
}

impl VectorField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.lib.d
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        BASIS_BUF.with(|buf| {
            let mut f = buf.borrow_mut();
            f.resize(self.lib.m(), 0.0);
            self.lib.eval_into(self.xi, x, &mut f);
            for (o, row) in out.iter_mut().zip(&self.coef) {
                *o = row.iter().zip(f.iter()).map(|(c, v)| c * v).sum();
            }
        })
    }
}

/// `dx/dt` predicted for task weights `w` at state `x`.
pub fn predict_derivative(model: &MetaModel, w: &TaskWeights, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.d()];
    model.field(w).eval(x, &mut out);
    out
}

/// Integrate the model from `x0` over `grid`.
pub fn rollout(model: &MetaModel, w: &TaskWeights, x0: &[f64], grid: &TimeGrid) -> Result<Trajectory> {
    integrate(&model.field(w), x0, grid, &DivergenceGuard::default())
}

/// Least-squares coefficients for `targets ≈ (W ⊙ Φ) F(states; ξ)`, solved
/// independently per output row over that row's open columns. Closed
/// entries are zero.
pub fn fit_weights_ls(model: &MetaModel, states: &[Vec<f64>], targets: &[Vec<f64>], ridge: f64) -> Result<TaskWeights> {
    let (d, m) = (model.d(), model.m());
    if states.len() != targets.len() {
        return Err(Error::Dimension(format!("{} states but {} targets", states.len(), targets.len())));
    }
    let n = states.len();
    let mut feats = vec![0.0; n * m];
    for (row, x) in feats.chunks_mut(m).zip(states) {
        model.lib.eval_into(&model.xi, x, row);
    }
    let g = model.gates();
    let mut w = TaskWeights::zeros(d, m);
    for j in 0..d {
        let cols = g.support(j);
        if cols.is_empty() {
            continue;
        }
        let p = cols.len();
        let mut a = Vec::with_capacity(n * p);
        for row in feats.chunks(m) {
            a.extend(cols.iter().map(|&k| row[k]));
        }
        let b: Vec<f64> = targets.iter().map(|t| t[j]).collect();
        let coef = normal_equations(&a, &b, n, p, ridge)?;
        for (&k, c) in cols.iter().zip(coef) {
            w.0[j][k] = c;
        }
    }
    Ok(w)
}

/// Symbolic form of the learned system, one `d<x>/dt = ...` clause per
/// state separated by ` ; `. Without `w` the coefficients are numbered
/// placeholders `W1, W2, ...`; with `w` they and the sine parameters are
/// printed numerically so the text evaluates back to the model.
pub fn extract_equation(model: &MetaModel, w: Option<&TaskWeights>) -> String {
    let g = model.gates();
    let xi = w.map(|_| &model.xi);
    let mut counter = 0;
    let rows: Vec<String> = (0..model.d())
        .map(|j| {
            let terms: Vec<String> = g
                .support(j)
                .into_iter()
                .map(|k| {
                    counter += 1;
                    let coef = match w {
                        Some(w) => fmt_num(w.0[j][k]),
                        None => format!("W{counter}"),
                    };
                    format!("{coef}·{}", model.lib.describe(k, &model.state_names, xi))
                })
                .collect();
            let rhs = if terms.is_empty() { "0".to_string() } else { terms.join(" + ") };
            format!("d{}/dt = {rhs}", model.state_names[j])
        })
        .collect();
    rows.join(" ; ")
}
