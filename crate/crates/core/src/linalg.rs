//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-9;

/// Solves `a x = b`, failing on (numerically) singular systems.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(Error::Singular(what.to_string()));
    }
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what.to_string()));
    }
    // A tiny pivot can pass the invertibility test and still produce garbage.
    let residual = (a * &x - b).amax();
    if residual > 1e-6 * (1.0 + b.amax()) {
        return Err(Error::Singular(format!("{what} (residual {residual:e})")));
    }
    Ok(x)
}

/// Orthonormal basis (as columns) for the span of `generators`, by
/// Gram-Schmidt with reorthogonalization. A generator counts as new when
/// its residual exceeds `RANK_TOL` relative to its own norm.
pub fn span_basis(generators: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for g in generators {
        let norm = g.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = g / norm;
        for _ in 0..2 {
            for b in &basis {
                r -= b * b.dot(&r);
            }
        }
        let rn = r.norm();
        if rn > RANK_TOL {
            basis.push(r / rn);
        }
    }
    if basis.is_empty() {
        return DMatrix::zeros(dim, 0);
    }
    DMatrix::from_columns(&basis)
}

/// Distance from `v` to the column span of an orthonormal `basis`.
pub fn distance_to_span(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    if basis.ncols() == 0 {
        return v.norm();
    }
    let proj = basis * (basis.transpose() * v);
    (v - proj).norm()
}

/// Spectral radius via Gelfand's formula, `||A^(2^m)||^(1/2^m)`, with the
/// running power renormalized in log space.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut b = a.abs();
    let mut log_scale = 0.0f64;
    let mut estimate = f64::NAN;
    for m in 0..52 {
        let norm = b.column_iter().map(|c| c.sum()).fold(0.0, f64::max);
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 { 0.0 } else { estimate };
        }
        log_scale += norm.ln();
        estimate = (log_scale / 2f64.powi(m)).exp();
        b /= norm;
        b = &b * &b;
        log_scale *= 2.0;
    }
    estimate
}

/// Stationary distribution of a row-stochastic matrix, solved as the least
/// squares problem `[P^T - I; 1^T] mu = [0; 1]`.
pub fn stationary_lsq(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Dimension("stationary solve needs a square, non-empty matrix".into()));
    }
    let mut a = DMatrix::zeros(n + 1, n);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(p.transpose() - DMatrix::identity(n, n)));
    a.row_mut(n).fill(1.0);
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    let rhs = q.transpose() * b;
    let mu = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Singular("stationary system".into()))?;
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("stationary system".into()));
    }
    Ok(mu)
}
