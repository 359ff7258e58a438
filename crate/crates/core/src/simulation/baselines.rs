use nalgebra::DMatrix;

use crate::covariance::weighted_covariance;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, FittedMethod, MethodKind};
use crate::forest::WeightVector;
use crate::thresholding::{LambdaSelection, LocalCovariance, ThresholdRule};

/// Sample covariance with denominator n.
pub fn sample_covariance(data: &Dataset) -> DMatrix<f64> {
    let all: Vec<usize> = (0..data.n()).collect();
    let w = WeightVector::uniform(data.n(), &all);
    weighted_covariance(data, &w, &w)
}

/// The covariate-free sample covariance.
pub struct StaticModel {
    pub cov: DMatrix<f64>,
}

impl StaticModel {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.n() < 2 {
            return Err(Error::InsufficientData {
                required: 2,
                actual: data.n(),
            });
        }
        Ok(Self {
            cov: sample_covariance(data),
        })
    }
}

impl LocalCovariance for StaticModel {
    fn raw_at(&self, _u: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.cov.clone())
    }

    fn held_out_at(&self, held_out: &Dataset, _u: &[f64]) -> Result<DMatrix<f64>> {
        Ok(sample_covariance(held_out))
    }
}

/// Retries with a doubled bandwidth before giving up on an empty window.
const WIDEN_STEPS: usize = 4;

fn epanechnikov(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.75 * (1.0 - t * t)
    } else {
        0.0
    }
}

/// Nadaraya–Watson weights on one covariate with an Epanechnikov kernel.
pub fn kernel_weights(data: &Dataset, covariate: usize, at: f64, bandwidth: f64) -> Result<WeightVector> {
    let mut h = bandwidth;
    for _ in 0..=WIDEN_STEPS {
        let raw: Vec<(usize, f64)> = (0..data.n())
            .map(|i| (i, epanechnikov((data.covariate(i, covariate) - at) / h)))
            .filter(|e| e.1 > 0.0)
            .collect();
        let total: f64 = raw.iter().map(|e| e.1).sum();
        if total > 0.0 {
            return Ok(WeightVector {
                n: data.n(),
                entries: raw.into_iter().map(|(i, w)| (i, w / total)).collect(),
            });
        }
        log::warn!("empty kernel window at bandwidth {h}; widening");
        h *= 2.0;
    }
    Err(Error::EmptyKernel { bandwidth })
}

/// Rule-of-thumb bandwidth 1.06·sd·n^(−1/5) of one covariate column.
pub fn default_bandwidth(data: &Dataset, covariate: usize) -> f64 {
    let n = data.n() as f64;
    let col = data.covariates().column(covariate);
    let mean = col.mean();
    let sd = if data.n() > 1 {
        (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if sd > 0.0 {
        1.06 * sd * n.powf(-0.2)
    } else {
        1.0
    }
}

/// Kernel-smoothed local covariance on one covariate. The same weights stand
/// in for both the mean and second-moment weights.
pub struct KernelModel {
    pub data: Dataset,
    pub covariate: usize,
    pub bandwidth: f64,
}

impl KernelModel {
    pub fn fit(data: Dataset, covariate: usize) -> Result<Self> {
        if covariate >= data.d() {
            return Self::with_bandwidth(data, covariate, 1.0);
        }
        let bandwidth = default_bandwidth(&data, covariate);
        Self::with_bandwidth(data, covariate, bandwidth)
    }

    pub fn with_bandwidth(data: Dataset, covariate: usize, bandwidth: f64) -> Result<Self> {
        if covariate >= data.d() {
            return Err(Error::config(format!(
                "kernel covariate {} out of range 1..={}",
                covariate + 1,
                data.d()
            )));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::config("kernel bandwidth must be positive"));
        }
        Ok(Self {
            data,
            covariate,
            bandwidth,
        })
    }

    fn cov_from(&self, data: &Dataset, u: &[f64]) -> Result<DMatrix<f64>> {
        if u.len() != data.d() {
            return Err(Error::DimensionMismatch {
                expected: data.d(),
                actual: u.len(),
            });
        }
        let w = kernel_weights(data, self.covariate, u[self.covariate], self.bandwidth)?;
        Ok(weighted_covariance(data, &w, &w))
    }
}

impl LocalCovariance for KernelModel {
    fn raw_at(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        self.cov_from(&self.data, u)
    }

    fn held_out_at(&self, held_out: &Dataset, u: &[f64]) -> Result<DMatrix<f64>> {
        self.cov_from(held_out, u)
    }
}

/// Thresholded sample covariance with a cross-validated λ.
pub fn static_baseline(
    data: &Dataset,
    rule: ThresholdRule,
    config: &EstimatorConfig,
) -> Result<(DMatrix<f64>, LambdaSelection)> {
    let fitted = FittedMethod::fit(MethodKind::Static, data, config)?;
    let est = fitted.estimate(&vec![0.0; data.d()], rule, false)?;
    Ok((est.thresholded, est.selection))
}

/// Thresholded kernel estimate at `u` smoothing on covariate `covariate`
/// (0-based).
pub fn kernel_dcm_baseline(
    data: &Dataset,
    covariate: usize,
    u: &[f64],
    rule: ThresholdRule,
    config: &EstimatorConfig,
) -> Result<(DMatrix<f64>, LambdaSelection)> {
    let fitted = FittedMethod::fit(MethodKind::Kernel { covariate }, data, config)?;
    let est = fitted.estimate(u, rule, false)?;
    Ok((est.thresholded, est.selection))
}
