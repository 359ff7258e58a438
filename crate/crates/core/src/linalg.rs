//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest |a_ij − a_ji|.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Rejects matrices whose asymmetry exceeds `tol` relative to their largest
/// entry (absolute below unit scale).
pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    let scale = a.amax().max(1.0);
    let asym = asymmetry(a);
    if asym > tol * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Averages a with its transpose in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Eigenvalues of a symmetric matrix (Householder tridiagonalization followed
/// by implicit QR), unsorted.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(a.clone()).eigenvalues
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).min()
}

/// Spectral norm of a symmetric matrix: the largest |eigenvalue|.
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).amax()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::NotPositiveDefinite)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Solves a·x = b for symmetric positive definite a.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

/// Lower Cholesky factor.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(a.clone())
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite)
}
