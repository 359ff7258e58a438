use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::sym_spectral_norm;

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            actual: a.nrows(),
        });
    }
    Ok(())
}

/// Frobenius and spectral norms of `est − truth`.
pub fn losses(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(f64, f64)> {
    same_shape(est, truth)?;
    let diff = est - truth;
    Ok((diff.norm(), sym_spectral_norm(&diff)))
}

/// True and false positive rates of the nonzero pattern over all index
/// pairs, diagonal included. An empty reference set gives TPR 1 and FPR 0.
pub fn sparsity_rates(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(f64, f64)> {
    same_shape(est, truth)?;
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (e, t) in est.iter().zip(truth.iter()) {
        if *t != 0.0 {
            pos += 1;
            tp += usize::from(*e != 0.0);
        } else {
            neg += 1;
            fp += usize::from(*e != 0.0);
        }
    }
    let tpr = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let fpr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
    Ok((tpr, fpr))
}

pub fn median_over_test_points(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
