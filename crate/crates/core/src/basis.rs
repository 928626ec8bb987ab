//! Basis-function dictionary with analytic partials in the state and in the
//! shared sine parameters.
//!
//! The base library for state dimension `d` is, in canonical order:
//! the constant, the `d` coordinates, the `d(d+1)/2` quadratic monomials
//! `x_j x_l` (`j <= l`, row-major), and one parametric sine
//! `sin(a_j x_j + b_j)` per coordinate. Every sine owns two consecutive
//! slots `(a, b)` in the global parameter vector.
//!
//! [`BasisLibrary::compose_layer2`] appends a second layer: a sine of every
//! base function and every product of a polynomial base term with a sine of
//! one coordinate. Each appended term owns fresh slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Constant,
    Linear {
        j: usize,
    },
    Quadratic {
        j: usize,
        l: usize,
    },
    /// `sin(xi[slot] * x_j + xi[slot + 1])`
    Sine {
        j: usize,
        slot: usize,
    },
    /// `sin(xi[slot] * f_inner(x) + xi[slot + 1])`, `inner` indexes the base layer.
    SineOf {
        inner: usize,
        slot: usize,
    },
    /// `f_poly(x) * sin(xi[slot] * x_j + xi[slot + 1])`
    PolyTimesSine {
        poly: usize,
        j: usize,
        slot: usize,
    },
}

impl BasisKind {
    pub fn xi_slots(&self) -> usize {
        match self {
            BasisKind::Constant | BasisKind::Linear { .. } | BasisKind::Quadratic { .. } => 0,
            _ => 2,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self, BasisKind::Constant | BasisKind::Linear { .. } | BasisKind::Quadratic { .. })
    }

    fn slot(&self) -> Option<usize> {
        match *self {
            BasisKind::Sine { slot, .. } | BasisKind::SineOf { slot, .. } | BasisKind::PolyTimesSine { slot, .. } => {
                Some(slot)
            }
            _ => None,
        }
    }
}

/// Shared basis parameters (sine scales and phases) in slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalParams(pub Vec<f64>);

impl GlobalParams {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One nonzero entry of the `m x |xi|` Jacobian of the basis outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiPartial {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisLibrary {
    pub d: usize,
    pub functions: Vec<BasisKind>,
    pub n_xi: usize,
    pub composed: bool,
    /// Number of base-layer functions; composed terms follow them.
    pub n_base: usize,
}

impl BasisLibrary {
    /// Constant, linear, quadratic and per-coordinate sine terms.
    pub fn standard(d: usize) -> Self {
        let mut functions = vec![BasisKind::Constant];
        functions.extend((0..d).map(|j| BasisKind::Linear { j }));
        for j in 0..d {
            for l in j..d {
                functions.push(BasisKind::Quadratic { j, l });
            }
        }
        functions.extend((0..d).map(|j| BasisKind::Sine { j, slot: 2 * j }));
        let n_base = functions.len();
        Self { d, functions, n_xi: 2 * d, composed: false, n_base }
    }

    pub fn m(&self) -> usize {
        self.functions.len()
    }

    /// Scales 1 and phases 0, so every sine starts as `sin(x_j)`.
    pub fn default_xi(&self) -> GlobalParams {
        let mut xi = vec![0.0; self.n_xi];
        for f in &self.functions {
            if let Some(s) = f.slot() {
                xi[s] = 1.0;
            }
        }
        GlobalParams(xi)
    }

    /// Append the second composition layer.
    pub fn compose_layer2(&self) -> Result<BasisLibrary> {
        if self.composed {
            return Err(Error::AlreadyComposed);
        }
        let mut lib = self.clone();
        let mut next = self.n_xi;
        for inner in 0..self.n_base {
            lib.functions.push(BasisKind::SineOf { inner, slot: next });
            next += 2;
        }
        let sines: Vec<usize> = self.functions[..self.n_base]
            .iter()
            .filter_map(|f| match f {
                BasisKind::Sine { j, .. } => Some(*j),
                _ => None,
            })
            .collect();
        for poly in 0..self.n_base {
            if !self.functions[poly].is_polynomial() {
                continue;
            }
            for &j in &sines {
                lib.functions.push(BasisKind::PolyTimesSine { poly, j, slot: next });
                next += 2;
            }
        }
        lib.n_xi = next;
        lib.composed = true;
        Ok(lib)
    }

    /// Composed library parameters that extend `base_xi` with default slots.
    pub fn extend_xi(&self, base_xi: &GlobalParams) -> GlobalParams {
        let mut xi = self.default_xi();
        xi.0[..base_xi.len()].copy_from_slice(&base_xi.0);
        xi
    }

    fn check(&self, xi: &GlobalParams, x: &[f64]) {
        debug_assert_eq!(x.len(), self.d, "state dimension");
        debug_assert_eq!(xi.len(), self.n_xi, "xi length");
    }

    fn poly_value(f: &BasisKind, x: &[f64]) -> f64 {
        match *f {
            BasisKind::Constant => 1.0,
            BasisKind::Linear { j } => x[j],
            BasisKind::Quadratic { j, l } => x[j] * x[l],
            _ => unreachable!("not a polynomial"),
        }
    }

    /// Evaluate every basis function at `x` into `out` (length `m`).
    pub fn eval_into(&self, xi: &GlobalParams, x: &[f64], out: &mut [f64]) {
        self.check(xi, x);
        let p = &xi.0;
        for (k, f) in self.functions.iter().enumerate() {
            out[k] = match *f {
                BasisKind::Sine { j, slot } => (p[slot] * x[j] + p[slot + 1]).sin(),
                BasisKind::SineOf { inner, slot } => (p[slot] * out[inner] + p[slot + 1]).sin(),
                BasisKind::PolyTimesSine { poly, j, slot } => out[poly] * (p[slot] * x[j] + p[slot + 1]).sin(),
                ref poly => Self::poly_value(poly, x),
            };
        }
    }

    pub fn eval(&self, xi: &GlobalParams, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.eval_into(xi, x, &mut out);
        out
    }

    /// Visit every nonzero `d f_k / d xi_s` at `x`; `vals` must hold `eval(xi, x)`.
    pub fn for_each_xi_partial(
        &self,
        xi: &GlobalParams,
        x: &[f64],
        vals: &[f64],
        mut visit: impl FnMut(usize, usize, f64),
    ) {
        let p = &xi.0;
        for (k, f) in self.functions.iter().enumerate() {
            match *f {
                BasisKind::Sine { j, slot } => {
                    let c = (p[slot] * x[j] + p[slot + 1]).cos();
                    visit(k, slot, x[j] * c);
                    visit(k, slot + 1, c);
                }
                BasisKind::SineOf { inner, slot } => {
                    let g = vals[inner];
                    let c = (p[slot] * g + p[slot + 1]).cos();
                    visit(k, slot, g * c);
                    visit(k, slot + 1, c);
                    if let BasisKind::Sine { j, slot: s2 } = self.functions[inner] {
                        let ci = (p[s2] * x[j] + p[s2 + 1]).cos();
                        visit(k, s2, p[slot] * c * x[j] * ci);
                        visit(k, s2 + 1, p[slot] * c * ci);
                    }
                }
                BasisKind::PolyTimesSine { poly, j, slot } => {
                    let c = (p[slot] * x[j] + p[slot + 1]).cos();
                    let pv = vals[poly];
                    visit(k, slot, pv * x[j] * c);
                    visit(k, slot + 1, pv * c);
                }
                _ => {}
            }
        }
    }

    /// [`Self::eval_into`] and [`Self::for_each_xi_partial`] in one pass.
    pub fn eval_with_xi_partials(
        &self,
        xi: &GlobalParams,
        x: &[f64],
        out: &mut [f64],
        visit: impl FnMut(usize, usize, f64),
    ) {
        self.eval_polynomial_into(x, out);
        self.eval_parametric_with_xi_partials(xi, x, out, visit);
    }

    /// Index of the first parametric function; everything before it is a
    /// polynomial and does not depend on the shared parameters.
    pub fn n_leading_polynomial(&self) -> usize {
        self.functions.iter().position(|f| !f.is_polynomial()).unwrap_or(self.functions.len())
    }

    /// Fill the leading polynomial entries of `out`.
    pub fn eval_polynomial_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_leading_polynomial();
        for (o, f) in out[..n].iter_mut().zip(&self.functions) {
            *o = Self::poly_value(f, x);
        }
    }

    /// Remaining entries of `out` and their parameter partials, given the
    /// leading polynomial entries already filled in.
    pub fn eval_parametric_with_xi_partials(
        &self,
        xi: &GlobalParams,
        x: &[f64],
        out: &mut [f64],
        mut visit: impl FnMut(usize, usize, f64),
    ) {
        self.check(xi, x);
        let p = &xi.0;
        let start = self.n_leading_polynomial();
        for (k, f) in self.functions.iter().enumerate().skip(start) {
            match *f {
                BasisKind::Sine { j, slot } => {
                    let arg = p[slot] * x[j] + p[slot + 1];
                    let c = arg.cos();
                    out[k] = arg.sin();
                    visit(k, slot, x[j] * c);
                    visit(k, slot + 1, c);
                }
                BasisKind::SineOf { inner, slot } => {
                    let g = out[inner];
                    let arg = p[slot] * g + p[slot + 1];
                    let c = arg.cos();
                    out[k] = arg.sin();
                    visit(k, slot, g * c);
                    visit(k, slot + 1, c);
                    if let BasisKind::Sine { j, slot: s2 } = self.functions[inner] {
                        let ci = (p[s2] * x[j] + p[s2 + 1]).cos();
                        visit(k, s2, p[slot] * c * x[j] * ci);
                        visit(k, s2 + 1, p[slot] * c * ci);
                    }
                }
                BasisKind::PolyTimesSine { poly, j, slot } => {
                    let arg = p[slot] * x[j] + p[slot + 1];
                    let c = arg.cos();
                    let pv = out[poly];
                    out[k] = pv * arg.sin();
                    visit(k, slot, pv * x[j] * c);
                    visit(k, slot + 1, pv * c);
                }
                ref poly => out[k] = Self::poly_value(poly, x),
            }
        }
    }

    /// Sparse Jacobian of the basis outputs with respect to the global parameters.
    pub fn grad_xi(&self, xi: &GlobalParams, x: &[f64]) -> Vec<XiPartial> {
        let vals = self.eval(xi, x);
        let mut out = Vec::new();
        self.for_each_xi_partial(xi, x, &vals, |row, col, value| out.push(XiPartial { row, col, value }));
        out
    }

    /// Dense `m x d` Jacobian of the basis outputs with respect to the state,
    /// written row-major into `jac`; `vals` must hold `eval(xi, x)`.
    pub fn grad_x_into(&self, xi: &GlobalParams, x: &[f64], vals: &[f64], jac: &mut [f64]) {
        let d = self.d;
        let p = &xi.0;
        jac.fill(0.0);
        for (k, f) in self.functions.iter().enumerate() {
            let row = k * d;
            match *f {
                BasisKind::Constant => {}
                BasisKind::Linear { j } => jac[row + j] = 1.0,
                BasisKind::Quadratic { j, l } => {
                    jac[row + j] += x[l];
                    jac[row + l] += x[j];
                }
                BasisKind::Sine { j, slot } => jac[row + j] = p[slot] * (p[slot] * x[j] + p[slot + 1]).cos(),
                BasisKind::SineOf { inner, slot } => {
                    let c = p[slot] * (p[slot] * vals[inner] + p[slot + 1]).cos();
                    for i in 0..d {
                        jac[row + i] = c * jac[inner * d + i];
                    }
                }
                BasisKind::PolyTimesSine { poly, j, slot } => {
                    let arg = p[slot] * x[j] + p[slot + 1];
                    let s = arg.sin();
                    for i in 0..d {
                        jac[row + i] = jac[poly * d + i] * s;
                    }
                    jac[row + j] += vals[poly] * p[slot] * arg.cos();
                }
            }
        }
    }

    pub fn grad_x(&self, xi: &GlobalParams, x: &[f64]) -> Vec<Vec<f64>> {
        let vals = self.eval(xi, x);
        let mut jac = vec![0.0; self.m() * self.d];
        self.grad_x_into(xi, x, &vals, &mut jac);
        jac.chunks(self.d).map(<[f64]>::to_vec).collect()
    }

    /// Human-readable term. With `xi` the sine parameters are printed
    /// numerically, otherwise as the placeholders `ξ` and `ξ'`.
    pub fn describe(&self, k: usize, names: &[String], xi: Option<&GlobalParams>) -> String {
        let sine = |slot: usize, arg: String| match xi {
            Some(p) => format!("sin({}·{} + {})", fmt_num(p.0[slot]), arg, fmt_num(p.0[slot + 1])),
            None => format!("sin(ξ·{arg}+ξ')"),
        };
        match self.functions[k] {
            BasisKind::Constant => "1".to_string(),
            BasisKind::Linear { j } => names[j].clone(),
            BasisKind::Quadratic { j, l } if j == l => format!("{}²", names[j]),
            BasisKind::Quadratic { j, l } => format!("{}·{}", names[j], names[l]),
            BasisKind::Sine { j, slot } => sine(slot, names[j].clone()),
            BasisKind::SineOf { inner, slot } => {
                let inner_s = self.describe(inner, names, xi);
                let arg = if matches!(self.functions[inner], BasisKind::Linear { .. } | BasisKind::Constant) {
                    inner_s
                } else {
                    format!("({inner_s})")
                };
                sine(slot, arg)
            }
            BasisKind::PolyTimesSine { poly, j, slot } => {
                format!("{}·{}", self.describe(poly, names, xi), sine(slot, names[j].clone()))
            }
        }
    }
}

/// Shortest decimal that round-trips the value exactly.
pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:?}")
    }
}
