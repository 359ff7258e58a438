//! End-to-end estimators: a raw local covariance model, a cross-validated
//! threshold, and the optional positive-definite correction.
//!
//! Three model families share this path: the forest estimator, the static
//! sample covariance, and the single-covariate kernel estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{FdcmForestConfig, ForestPair};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::rng;
use crate::simulation::baselines::{KernelModel, StaticModel};
use crate::thresholding::{
    default_c_n, pd_correct_matrix, threshold_matrix, CrossValidator, LambdaSelection, LocalCovariance,
    PdCorrection, ThresholdRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    Fdcm,
    Static,
    /// Kernel smoothing on one covariate (0-based index).
    Kernel { covariate: usize },
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodKind::Fdcm => write!(f, "fdcm"),
            MethodKind::Static => write!(f, "static"),
            MethodKind::Kernel { covariate } => write!(f, "kernel{}", covariate + 1),
        }
    }
}

/// A method row: model family, whether the PD correction is applied, and the
/// threshold rule. Written `[m]family:rule`, e.g. `fdcm:soft`, `mfdcm:scad:3.7`,
/// `kernel1:hard`, `mkernel2:alasso`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub modified: bool,
    pub rule: ThresholdRule,
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = if self.modified { "m" } else { "" };
        write!(f, "{m}{}:{}", self.kind, self.rule)
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, rule) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::config(format!("method `{s}` must look like family:rule")))?;
        let rule: ThresholdRule = rule.parse()?;
        let (modified, family) = match family.strip_prefix('m') {
            Some(rest) if rest.starts_with("fdcm") || rest.starts_with("kernel") || rest == "static" => (true, rest),
            _ => (false, family),
        };
        let kind = match family {
            "fdcm" => MethodKind::Fdcm,
            "static" => MethodKind::Static,
            other => {
                let j = other
                    .strip_prefix("kernel")
                    .and_then(|j| j.parse::<usize>().ok())
                    .filter(|j| *j >= 1)
                    .ok_or_else(|| Error::config(format!("unknown method family `{other}`")))?;
                MethodKind::Kernel { covariate: j - 1 }
            }
        };
        Ok(Self { kind, modified, rule })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// Select λ separately at every query point.
    PerPoint,
    /// Select λ once at the covariate centroid of the training data.
    Shared,
}

impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-point" | "point" => Ok(LambdaMode::PerPoint),
            "shared" => Ok(LambdaMode::Shared),
            other => Err(Error::config(format!("unknown lambda mode `{other}`"))),
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMode::PerPoint => "per-point",
            LambdaMode::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub forests: FdcmForestConfig,
    pub cv_folds: usize,
    pub grid_size: usize,
    pub lambda_mode: LambdaMode,
    /// Fixed c_n; `None` uses [`default_c_n`].
    pub c_n: Option<f64>,
    /// Trees per forest inside CV folds; `None` means max(B/5, 50) capped at B.
    pub cv_trees: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            forests: FdcmForestConfig::default(),
            cv_folds: 5,
            grid_size: 20,
            lambda_mode: LambdaMode::PerPoint,
            c_n: None,
            cv_trees: None,
        }
    }
}

impl EstimatorConfig {
    pub fn seed(&self) -> u64 {
        self.forests.forest.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.forests.forest.seed = seed;
        out
    }

    pub fn cv_tree_count(&self) -> usize {
        let b = self.forests.forest.trees;
        self.cv_trees.unwrap_or_else(|| (b / 5).max(50).min(b))
    }
}

/// The forest model restricted to the rows it was trained on.
pub struct FdcmModel {
    pub data: Dataset,
    pub forests: ForestPair,
}

impl FdcmModel {
    pub fn fit(data: Dataset, config: &FdcmForestConfig) -> Result<Self> {
        let forests = ForestPair::train(&data, config)?;
        Ok(Self { data, forests })
    }
}

impl LocalCovariance for FdcmModel {
    fn raw_at(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.forests.raw_cov(&self.data, u)?.matrix)
    }

    fn held_out_at(&self, held_out: &Dataset, u: &[f64]) -> Result<DMatrix<f64>> {
        self.forests.held_out_cov(held_out, u)
    }
}

/// Every stage of one estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedEstimate {
    pub u: Vec<f64>,
    pub raw: DMatrix<f64>,
    pub selection: LambdaSelection,
    pub thresholded: DMatrix<f64>,
    /// Present for modified methods.
    pub corrected: Option<(DMatrix<f64>, PdCorrection)>,
}

impl StagedEstimate {
    /// The method's reported estimate: corrected when available, otherwise
    /// thresholded.
    pub fn final_matrix(&self) -> &DMatrix<f64> {
        self.corrected.as_ref().map(|c| &c.0).unwrap_or(&self.thresholded)
    }
}

/// A fitted model plus its cross-validation folds.
pub struct Fitted<M> {
    full: M,
    cv: CrossValidator<M>,
    centroid: Vec<f64>,
    grid_size: usize,
    lambda_mode: LambdaMode,
    c_n: Option<f64>,
}

impl<M: LocalCovariance> Fitted<M> {
    fn select(&self, raw: &DMatrix<f64>, u: &[f64], rule: ThresholdRule) -> Result<LambdaSelection> {
        match self.lambda_mode {
            LambdaMode::PerPoint => self.cv.select(raw, u, rule, self.grid_size),
            LambdaMode::Shared => {
                let at_centroid = self.full.raw_at(&self.centroid)?;
                self.cv.select(&at_centroid, &self.centroid, rule, self.grid_size)
            }
        }
    }

    pub fn estimate(&self, u: &[f64], rule: ThresholdRule, modified: bool) -> Result<StagedEstimate> {
        let raw = self.full.raw_at(u)?;
        let selection = self.select(&raw, u, rule)?;
        let thresholded = threshold_matrix(&raw, selection.lambda, rule);
        let corrected = if modified {
            let c_n = self.c_n.unwrap_or_else(|| default_c_n(&thresholded));
            Some(pd_correct_matrix(&thresholded, c_n)?)
        } else {
            None
        };
        Ok(StagedEstimate {
            u: u.to_vec(),
            raw,
            selection,
            thresholded,
            corrected,
        })
    }

    pub fn model(&self) -> &M {
        &self.full
    }
}

fn centroid(data: &Dataset) -> Vec<f64> {
    data.covariates().row_mean().iter().copied().collect()
}

/// A fitted model of any family.
pub enum FittedMethod {
    Fdcm(Fitted<FdcmModel>),
    Static(Fitted<StaticModel>),
    Kernel(Fitted<KernelModel>),
}

impl FittedMethod {
    /// Fits `kind` on `data`. Forest seeds derive from `config.seed()`:
    /// the full model uses it directly, fold v uses substream `("fold", v)`,
    /// and fold membership uses substream `("cv", 0)`.
    pub fn fit(kind: MethodKind, data: &Dataset, config: &EstimatorConfig) -> Result<Self> {
        let seed = config.seed();
        let cv_seed = rng::derive_seed(seed, "cv", 0);
        let folds = config.cv_folds;
        let wrap = |lambda_mode| (centroid(data), config.grid_size, lambda_mode, config.c_n);
        match kind {
            MethodKind::Fdcm => {
                config.forests.forest.validate(data.n(), data.d())?;
                let fold_config = |v: usize| FdcmForestConfig {
                    forest: ForestConfig {
                        trees: config.cv_tree_count(),
                        seed: rng::derive_seed(seed, "fold", v as u64),
                        ..config.forests.forest.clone()
                    },
                    shared_trees: config.forests.shared_trees,
                };
                let (full, cv) = rayon::join(
                    || FdcmModel::fit(data.clone(), &config.forests),
                    || CrossValidator::build(data, folds, cv_seed, |sub, v| FdcmModel::fit(sub, &fold_config(v))),
                );
                let (centroid, grid_size, lambda_mode, c_n) = wrap(config.lambda_mode);
                Ok(FittedMethod::Fdcm(Fitted {
                    full: full?,
                    cv: cv?,
                    centroid,
                    grid_size,
                    lambda_mode,
                    c_n,
                }))
            }
            MethodKind::Static => {
                let full = StaticModel::fit(data)?;
                let cv = CrossValidator::build(data, folds, cv_seed, |sub, _| StaticModel::fit(&sub))?;
                // u plays no role, so one selection serves every point.
                let (centroid, grid_size, lambda_mode, c_n) = wrap(LambdaMode::Shared);
                Ok(FittedMethod::Static(Fitted {
                    full,
                    cv,
                    centroid,
                    grid_size,
                    lambda_mode,
                    c_n,
                }))
            }
            MethodKind::Kernel { covariate } => {
                let full = KernelModel::fit(data.clone(), covariate)?;
                let cv = CrossValidator::build(data, folds, cv_seed, |sub, _| KernelModel::fit(sub, covariate))?;
                let (centroid, grid_size, lambda_mode, c_n) = wrap(config.lambda_mode);
                Ok(FittedMethod::Kernel(Fitted {
                    full,
                    cv,
                    centroid,
                    grid_size,
                    lambda_mode,
                    c_n,
                }))
            }
        }
    }

    pub fn estimate(&self, u: &[f64], rule: ThresholdRule, modified: bool) -> Result<StagedEstimate> {
        match self {
            FittedMethod::Fdcm(f) => f.estimate(u, rule, modified),
            FittedMethod::Static(f) => f.estimate(u, rule, modified),
            FittedMethod::Kernel(f) => f.estimate(u, rule, modified),
        }
    }

    pub fn estimate_spec(&self, u: &[f64], spec: &MethodSpec) -> Result<StagedEstimate> {
        self.estimate(u, spec.rule, spec.modified)
    }
}

/// Cross-validated λ for the forest estimator at `u`: forests are refit on
/// each of `folds` complements and scored against held-out raw estimates.
pub fn select_lambda(
    data: &Dataset,
    config: &EstimatorConfig,
    u: &[f64],
    rule: ThresholdRule,
) -> Result<LambdaSelection> {
    let fitted = FittedMethod::fit(MethodKind::Fdcm, data, config)?;
    Ok(fitted.estimate(u, rule, false)?.selection)
}
