//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Symmetrizes in place: `(M + M^T) / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Adds `weight * v v^T` to `m`.
#[inline]
pub(crate) fn add_outer(m: &mut DMatrix<f64>, v: &[f64], weight: f64) {
    let n = v.len();
    for j in 0..n {
        let wj = weight * v[j];
        for i in 0..n {
            m[(i, j)] += wj * v[i];
        }
    }
}

/// 2-norm condition number from the singular values; infinite when singular.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max.is_finite() && min.is_finite()) {
        return f64::INFINITY;
    }
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric matrix if its condition number stays below `max_cond`.
pub(crate) fn checked_inverse(m: &DMatrix<f64>, max_cond: f64) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) || condition_number(m) > max_cond {
        return None;
    }
    let mut inv = m.clone().try_inverse()?;
    symmetrize(&mut inv);
    Some(inv)
}

/// Solves `m x = rhs` for symmetric positive-definite `m`, adding increasing
/// diagonal damping when the Cholesky factorization fails. Returns the
/// solution and whether damping was needed.
pub(crate) fn solve_spd_damped(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
    if let Some(ch) = m.clone().cholesky() {
        return Some((ch.solve(rhs), false));
    }
    let scale = m.diagonal().iter().map(|d| d.abs()).fold(0.0_f64, f64::max).max(1e-300);
    let mut lambda = 1e-10 * scale;
    for _ in 0..30 {
        let damped = m + DMatrix::identity(m.nrows(), m.ncols()) * lambda;
        if let Some(ch) = damped.cholesky() {
            return Some((ch.solve(rhs), true));
        }
        lambda *= 10.0;
    }
    None
}

/// Smallest eigenvalue of a symmetric matrix.
#[cfg(test)]
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
