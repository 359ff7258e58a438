//! Generalized off-diagonal thresholding, cross-validated penalty selection and
//! positive-definite correction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{DynCovEstimate, Stage};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_ALASSO_ETA: f64 = 3.0;

/// Symmetry tolerance (relative to the largest entry) checked before any
/// eigen-decomposition.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    Hard,
    Soft,
    Scad { a: f64 },
    AdaptiveLasso { eta: f64 },
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Scad { a } if !(a > 2.0) => Err(Error::config("SCAD requires a > 2")),
            ThresholdRule::AdaptiveLasso { eta } if !(eta > 0.0) => {
                Err(Error::config("adaptive lasso requires eta > 0"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdRule::Hard => write!(f, "hard"),
            ThresholdRule::Soft => write!(f, "soft"),
            ThresholdRule::Scad { a } => write!(f, "scad:{a}"),
            ThresholdRule::AdaptiveLasso { eta } => write!(f, "alasso:{eta}"),
        }
    }
}

impl FromStr for ThresholdRule {
    type Err = Error;

    /// `hard | soft | scad[:a] | alasso[:eta]`
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |a: &str| {
            a.parse::<f64>()
                .map_err(|_| Error::config(format!("bad rule parameter `{a}`")))
        };
        let rule = match (name.trim().to_ascii_lowercase().as_str(), arg) {
            ("hard", None) => ThresholdRule::Hard,
            ("soft", None) => ThresholdRule::Soft,
            ("scad", None) => ThresholdRule::Scad { a: DEFAULT_SCAD_A },
            ("scad", Some(a)) => ThresholdRule::Scad { a: number(a)? },
            ("alasso", None) => ThresholdRule::AdaptiveLasso {
                eta: DEFAULT_ALASSO_ETA,
            },
            ("alasso", Some(e)) => ThresholdRule::AdaptiveLasso { eta: number(e)? },
            _ => return Err(Error::config(format!("unknown threshold rule `{s}`"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Pulls a candidate magnitude into the band the shrinkage laws allow,
/// `|z| − λ ≤ m ≤ |z|`, as evaluated in floating point.
fn settle(z: f64, lambda: f64, magnitude: f64) -> f64 {
    let az = z.abs();
    let mut m = magnitude.clamp(0.0, az);
    while az - m > lambda {
        m = m.next_up();
    }
    m.copysign(z)
}

/// The shrinkage operator s_λ(z). Every rule satisfies
/// `|s(z)| ≤ |z|`, `s(z) = 0` for `|z| ≤ λ`, and `|s(z) − z| ≤ λ`.
pub fn shrink(z: f64, lambda: f64, rule: ThresholdRule) -> f64 {
    debug_assert!(lambda >= 0.0);
    let az = z.abs();
    if az <= lambda {
        return 0.0;
    }
    let magnitude = match rule {
        ThresholdRule::Hard => az,
        ThresholdRule::Soft => az - lambda,
        ThresholdRule::Scad { a } => {
            if az <= 2.0 * lambda {
                az - lambda
            } else if az <= a * lambda {
                ((a - 1.0) * az - a * lambda) / (a - 2.0)
            } else {
                az
            }
        }
        // λ^(η+1)·|z|^(−η) written as λ·(λ/|z|)^η: the ratio is below 1, so
        // tiny |z| cannot overflow.
        ThresholdRule::AdaptiveLasso { eta } => az - lambda * (lambda / az).powf(eta),
    };
    settle(z, lambda, magnitude)
}

/// Shrinks off-diagonal entries; the diagonal is copied unchanged.
pub fn threshold_matrix(m: &DMatrix<f64>, lambda: f64, rule: ThresholdRule) -> DMatrix<f64> {
    let p = m.nrows();
    let mut out = m.clone();
    for j in 0..p {
        for i in (j + 1)..p {
            let v = shrink(0.5 * (m[(i, j)] + m[(j, i)]), lambda, rule);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn apply_threshold(est: &DynCovEstimate, lambda: f64, rule: ThresholdRule) -> Result<DynCovEstimate> {
    if est.stage != Stage::Raw {
        return Err(Error::StageMismatch {
            expected: Stage::Raw,
            actual: est.stage,
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda must be nonnegative"));
    }
    Ok(DynCovEstimate {
        u: est.u.clone(),
        matrix: threshold_matrix(&est.matrix, lambda, rule),
        stage: Stage::Thresholded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdCorrection {
    /// Negated smallest eigenvalue when it is ≤ 0, otherwise 0.
    pub delta_hat: f64,
    pub c_n: f64,
    pub applied: bool,
}

/// 1e-4 times the largest diagonal entry (1e-4 when that is not positive).
pub fn default_c_n(m: &DMatrix<f64>) -> f64 {
    let top = m.diagonal().max();
    if top > 0.0 {
        1e-4 * top
    } else {
        1e-4
    }
}

/// Shifts a symmetric matrix by (δ̂ + c_n)·I when its smallest eigenvalue is
/// not positive, so the result has smallest eigenvalue c_n.
pub fn pd_correct_matrix(m: &DMatrix<f64>, c_n: f64) -> Result<(DMatrix<f64>, PdCorrection)> {
    if !(c_n > 0.0) {
        return Err(Error::config("c_n must be positive"));
    }
    linalg::check_symmetric(m, SYMMETRY_TOL)?;
    let mut sym = m.clone();
    linalg::symmetrize(&mut sym);
    let mu_min = linalg::min_eigenvalue(&sym);
    if mu_min > 0.0 {
        return Ok((
            sym,
            PdCorrection {
                delta_hat: 0.0,
                c_n,
                applied: false,
            },
        ));
    }
    let delta_hat = -mu_min;
    for i in 0..sym.nrows() {
        sym[(i, i)] += delta_hat + c_n;
    }
    Ok((
        sym,
        PdCorrection {
            delta_hat,
            c_n,
            applied: true,
        },
    ))
}

pub fn pd_correct(est: &DynCovEstimate, c_n: f64) -> Result<(DynCovEstimate, PdCorrection)> {
    if est.stage == Stage::PdCorrected {
        return Err(Error::StageMismatch {
            expected: Stage::Thresholded,
            actual: est.stage,
        });
    }
    let (matrix, corr) = pd_correct_matrix(&est.matrix, c_n)?;
    Ok((
        DynCovEstimate {
            u: est.u.clone(),
            matrix,
            stage: Stage::PdCorrected,
        },
        corr,
    ))
}

/// Inverse of a corrected estimate via Cholesky.
pub fn precision(est: &DynCovEstimate) -> Result<DMatrix<f64>> {
    if est.stage != Stage::PdCorrected {
        return Err(Error::StageMismatch {
            expected: Stage::PdCorrected,
            actual: est.stage,
        });
    }
    linalg::spd_inverse(&est.matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub cv_scores: Vec<f64>,
}

/// Ratio between the smallest positive grid value and the grid maximum.
const GRID_SPAN: f64 = 1e-2;

/// 0 followed by `size` log-spaced values from `max·GRID_SPAN` to `max`.
/// Collapses to `[0]` when `max` is zero.
pub fn lambda_grid(max_off_diagonal: f64, size: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    if !(max_off_diagonal > 0.0) || size == 0 {
        return grid;
    }
    if size == 1 {
        grid.push(max_off_diagonal);
        return grid;
    }
    let lo = GRID_SPAN.ln();
    for g in 0..size {
        let t = g as f64 / (size - 1) as f64;
        grid.push(max_off_diagonal * (lo * (1.0 - t)).exp());
    }
    grid
}

pub fn max_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let mut best = 0.0f64;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                best = best.max(m[(i, j)].abs());
            }
        }
    }
    best
}

/// A covariance model fitted on some rows that can produce a raw estimate at
/// any query point, and a comparable estimate from rows it has not seen.
pub trait LocalCovariance: Send + Sync {
    fn raw_at(&self, u: &[f64]) -> Result<DMatrix<f64>>;
    fn held_out_at(&self, held_out: &Dataset, u: &[f64]) -> Result<DMatrix<f64>>;
}

/// Balanced random fold assignment: positions of a shuffled index list taken
/// round-robin. Uses substream `("fold", 0)` of `seed`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "fold", 0));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in order.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

/// V-fold cross-validation of the threshold: fold v's complement model is
/// thresholded and scored against the raw estimate formed from fold v.
pub struct CrossValidator<M> {
    folds: Vec<(M, Dataset)>,
}

impl<M: LocalCovariance> CrossValidator<M> {
    /// Fits one model per fold complement. `fit` receives the complement and
    /// the fold number.
    pub fn build<F>(data: &Dataset, folds: usize, seed: u64, fit: F) -> Result<Self>
    where
        F: Fn(Dataset, usize) -> Result<M> + Sync,
    {
        if folds < 2 {
            return Err(Error::config("cross-validation needs at least 2 folds"));
        }
        if data.n() < 2 * folds {
            return Err(Error::InsufficientData {
                required: 2 * folds,
                actual: data.n(),
            });
        }
        let assignment = fold_assignment(data.n(), folds, seed);
        let folds = assignment
            .par_iter()
            .enumerate()
            .map(|(v, fold)| {
                let complement: Vec<usize> = (0..data.n()).filter(|i| fold.binary_search(i).is_err()).collect();
                let model = fit(data.subset(&complement)?, v)?;
                Ok((model, data.subset(fold)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { folds })
    }

    pub fn folds(&self) -> usize {
        self.folds.len()
    }

    /// Mean held-out squared Frobenius error for each λ in `grid`.
    pub fn scores(&self, u: &[f64], grid: &[f64], rule: ThresholdRule) -> Result<Vec<f64>> {
        let per_fold = self
            .folds
            .par_iter()
            .map(|(model, held_out)| {
                let train = model.raw_at(u)?;
                let target = model.held_out_at(held_out, u)?;
                Ok(grid
                    .iter()
                    .map(|&l| (threshold_matrix(&train, l, rule) - &target).norm_squared())
                    .collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let v = per_fold.len() as f64;
        Ok((0..grid.len())
            .map(|g| per_fold.iter().map(|s| s[g]).sum::<f64>() / v)
            .collect())
    }

    /// Picks λ at `u` from a grid scaled by the full-data raw estimate. Ties go
    /// to the smaller λ.
    pub fn select(&self, full_raw: &DMatrix<f64>, u: &[f64], rule: ThresholdRule, grid_size: usize) -> Result<LambdaSelection> {
        let grid = lambda_grid(max_off_diagonal(full_raw), grid_size);
        let cv_scores = self.scores(u, &grid, rule)?;
        let best = cv_scores
            .iter()
            .enumerate()
            .fold(0, |b, (g, s)| if *s < cv_scores[b] { g } else { b });
        Ok(LambdaSelection {
            lambda: grid[best],
            grid,
            cv_scores,
        })
    }
}
