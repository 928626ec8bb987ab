//! Dense least-squares helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge fallback used when the plain normal equations are singular.
pub const FALLBACK_RIDGE: f64 = 1e-8;

/// Solve `min ||A x - b||^2` through column-normalised normal equations.
///
/// `a` is row-major `n x p`. Columns are scaled to unit RMS, the normal
/// equations `(G + ridge I) z = c` are solved by Cholesky (with `G` the
/// mean Gram matrix) and `z` is unscaled. When `ridge == 0` and the Gram
/// matrix is not positive definite the solve is retried with
/// [`FALLBACK_RIDGE`].
pub fn normal_equations(a: &[f64], b: &[f64], n: usize, p: usize, ridge: f64) -> Result<Vec<f64>> {
    if p == 0 {
        return Ok(Vec::new());
    }
    if a.len() != n * p || b.len() != n {
        return Err(Error::Dimension("least-squares operands".into()));
    }
    if n == 0 {
        return Ok(vec![0.0; p]);
    }
    let scale: Vec<f64> = (0..p)
        .map(|c| {
            let ms = (0..n).map(|r| a[r * p + c].powi(2)).sum::<f64>() / n as f64;
            if ms > 0.0 && ms.is_finite() {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for r in 0..n {
        let row = &a[r * p..(r + 1) * p];
        for i in 0..p {
            let ai = row[i] / scale[i];
            rhs[i] += ai * b[r];
            for j in i..p {
                gram[(i, j)] += ai * row[j] / scale[j];
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            gram[(i, j)] /= n as f64;
            gram[(j, i)] = gram[(i, j)];
        }
        rhs[i] /= n as f64;
    }
    if gram.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares operands".into()));
    }
    let solve = |lam: f64| {
        let mut g = gram.clone();
        for i in 0..p {
            g[(i, i)] += lam;
        }
        g.cholesky().map(|c| c.solve(&rhs))
    };
    let z = match solve(ridge) {
        Some(z) if z.iter().all(|v| v.is_finite()) => z,
        _ => solve(ridge.max(FALLBACK_RIDGE)).ok_or(Error::SingularFit)?,
    };
    Ok(z.iter().zip(&scale).map(|(v, s)| v / s).collect())
}

/// Raw ridge regression `(A^T A + alpha I) x = A^T b`; `alpha == 0` uses an
/// SVD least-squares solve.
pub fn ridge_raw(a: &[f64], b: &[f64], n: usize, p: usize, alpha: f64) -> Result<Vec<f64>> {
    if p == 0 {
        return Ok(Vec::new());
    }
    let am = DMatrix::from_row_slice(n, p, a);
    let bv = DVector::from_column_slice(b);
    if alpha == 0.0 {
        let svd = am.svd(true, true);
        let eps = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let x = svd.solve(&bv, eps).map_err(|_| Error::SingularFit)?;
        return Ok(x.iter().copied().collect());
    }
    let mut g = am.transpose() * &am;
    for i in 0..p {
        g[(i, i)] += alpha;
    }
    let rhs = am.transpose() * bv;
    let x = match g.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => g.lu().solve(&rhs).ok_or(Error::SingularFit)?,
    };
    Ok(x.iter().copied().collect())
}

/// Levenberg–Marquardt direction solving `(G + μ diag G) δ = -g`, with `μ`
/// raised from 1e-10 by factors of 100 until the Cholesky solve succeeds.
pub fn damped_gauss_newton(gn: &DMatrix<f64>, grad: &[f64]) -> Option<Vec<f64>> {
    let p = grad.len();
    let rhs = DVector::from_iterator(p, grad.iter().map(|g| -g));
    let mut mu = 1e-10;
    for _ in 0..12 {
        let mut a = gn.clone();
        for q in 0..p {
            a[(q, q)] += mu * gn[(q, q)].max(1e-300) + 1e-300;
        }
        if let Some(ch) = a.cholesky() {
            let x = ch.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x.iter().copied().collect());
            }
        }
        mu *= 100.0;
    }
    None
}
