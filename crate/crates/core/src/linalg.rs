//! Small dense linear-algebra helpers shared by flows, contrasts and
//! information matrices.
//!
//! Quadratic forms are always evaluated through Cholesky solves, never
//! through explicit inverses.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative ridge added on the first Cholesky failure.
pub const RIDGE_SCALE: f64 = 1e-10;

/// Cholesky factorization with one ridge repair.
///
/// On failure, `lambda = RIDGE_SCALE * trace(m)/p` is added to the diagonal
/// once; a second failure is [`Error::SingularCovariance`].
pub fn cholesky_with_ridge(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let p = m.nrows();
    let ridge = RIDGE_SCALE * m.trace().abs() / p as f64;
    let mut repaired = m.clone();
    for i in 0..p {
        repaired[(i, i)] += ridge;
    }
    Cholesky::new(repaired).ok_or(Error::SingularCovariance)
}

/// `x^T M^{-1} x` via a Cholesky solve.
pub fn quad_form_inv(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let y = chol.solve(x);
    x.dot(&y)
}

/// `log det M` from its Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// Symmetric inverse through Cholesky, with one ridge repair.
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky_with_ridge(m)?.inverse())
}

/// In-place symmetrization `m <- (m + m^T)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Maximum absolute deviation from symmetry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// True when every entry is finite.
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quad_form_matches_explicit_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        let chol = cholesky_with_ridge(&m).unwrap();
        let inv = m.clone().try_inverse().unwrap();
        assert_relative_eq!(
            quad_form_inv(&chol, &x),
            (x.transpose() * inv * &x)[(0, 0)],
            max_relative = 1e-12
        );
    }

    #[test]
    fn log_det_matches_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = cholesky_with_ridge(&m).unwrap();
        assert_relative_eq!(log_det(&chol), m.determinant().ln(), max_relative = 1e-12);
    }

    #[test]
    fn ridge_repairs_semidefinite_matrix() {
        // rank-1, exactly singular
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_ridge(&m).is_ok());
    }

    #[test]
    fn hard_failure_is_singular_covariance() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_with_ridge(&m),
            Err(Error::SingularCovariance)
        ));
    }
}
