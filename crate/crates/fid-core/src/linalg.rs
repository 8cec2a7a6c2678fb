//! Dense linear-algebra helpers shared by the filter, engine, and test layers.
//!
//! Everything funnels through Cholesky factorizations: quadratic forms and log
//! determinants of innovation covariances are never computed via explicit
//! inverses. All checks treat asymmetry beyond a small tolerance as an error
//! rather than silently symmetrizing caller data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FidError, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Replaces `m` with its symmetric part `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Cholesky factorization with symmetry and finiteness checks.
///
/// Fails with [`FidError::NotSpd`] when the matrix is asymmetric or not
/// positive definite; `context` names the matrix in the error.
pub fn cholesky_spd(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if !all_finite_mat(m) {
        return Err(FidError::NonFinite(context));
    }
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(FidError::NotSpd { context });
    }
    Cholesky::new(m.clone()).ok_or(FidError::NotSpd { context })
}

/// Quadratic form `e^T S^{-1} e` for SPD `S` given its Cholesky factor.
///
/// Computed as `||L^{-1} e||^2`, which is nonnegative by construction.
pub fn quad_form_inv(chol: &Cholesky<f64, Dyn>, e: &DVector<f64>) -> Result<f64> {
    let z = chol
        .l_dirty()
        .solve_lower_triangular(e)
        .ok_or(FidError::NotSpd {
            context: "quad_form_inv",
        })?;
    Ok(z.norm_squared())
}

/// `log det S` for SPD `S` given its Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// Draws `mean + L z` with `z ~ N(0, I)` where `L` is a Cholesky factor of the
/// target covariance.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    mean + chol_l * z
}

/// Lower Cholesky factor of an SPD matrix, for repeated sampling.
pub fn cholesky_factor(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    Ok(cholesky_spd(m, context)?.unpack())
}
