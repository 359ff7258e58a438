//! Raw dynamic covariance: forest-weighted second moment minus the outer
//! product of the forest-weighted mean.
//!
//! The raw estimate is symmetric but not necessarily positive semidefinite;
//! see [`crate::thresholding::pd_correct`] for the corrected stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{train_forest, Forest, ForestConfig, ResponseKind, WeightVector};
use crate::linalg::symmetrize;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    Thresholded,
    PdCorrected,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Thresholded => "thresholded",
            Stage::PdCorrected => "corrected",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Stage::Raw),
            "thresholded" => Ok(Stage::Thresholded),
            "corrected" | "pd" => Ok(Stage::PdCorrected),
            other => Err(Error::config(format!("unknown stage `{other}`"))),
        }
    }
}

/// A symmetric p×p estimate at query point `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynCovEstimate {
    pub u: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub stage: Stage,
}

impl DynCovEstimate {
    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }
}

fn check_forest(forest: &Forest, data: &Dataset, kind: ResponseKind) -> Result<()> {
    if forest.fingerprint != data.fingerprint() {
        return Err(Error::DatasetMismatch);
    }
    // Mean weights may come from either forest kind (shared trees).
    if kind == ResponseKind::SecondMoment && forest.kind != ResponseKind::SecondMoment {
        return Err(Error::config(format!(
            "forest grown for {:?} targets, {:?} required",
            forest.kind, kind
        )));
    }
    Ok(())
}

/// Σᵢ wᵢ·Yᵢ.
pub fn weighted_mean(data: &Dataset, w: &WeightVector) -> DVector<f64> {
    let mut out = DVector::zeros(data.p());
    for &(i, wi) in &w.entries {
        out.axpy(wi, &data.response(i), 1.0);
    }
    out
}

/// Σᵢ wᵢ·YᵢYᵢᵀ, assembled as (W·Y_S)ᵀ·Y_S over the weight support S.
pub fn weighted_second_moment(data: &Dataset, w: &WeightVector) -> DMatrix<f64> {
    let rows: Vec<usize> = w.entries.iter().map(|e| e.0).collect();
    let support = data.responses().select_rows(&rows);
    let mut weighted = support.clone();
    for (r, &(_, wi)) in w.entries.iter().enumerate() {
        weighted.row_mut(r).scale_mut(wi);
    }
    let mut m = weighted.tr_mul(&support);
    symmetrize(&mut m);
    m
}

/// Σβᵢ YᵢYᵢᵀ − (Σαᵢ Yᵢ)(Σαᵢ Yᵢ)ᵀ for explicit weight vectors.
pub fn weighted_covariance(data: &Dataset, alpha: &WeightVector, beta: &WeightVector) -> DMatrix<f64> {
    let mean = weighted_mean(data, alpha);
    let mut cov = weighted_second_moment(data, beta);
    cov.ger(-1.0, &mean, &mean, 1.0);
    symmetrize(&mut cov);
    cov
}

/// Forest estimate of E(Y | U = u).
pub fn cond_mean(mean_forest: &Forest, data: &Dataset, u: &[f64]) -> Result<DVector<f64>> {
    check_forest(mean_forest, data, ResponseKind::Mean)?;
    Ok(weighted_mean(data, &mean_forest.weight_vector(u)?))
}

/// Forest estimate of E(YYᵀ | U = u).
pub fn cond_second_moment(second_moment_forest: &Forest, data: &Dataset, u: &[f64]) -> Result<DMatrix<f64>> {
    check_forest(second_moment_forest, data, ResponseKind::SecondMoment)?;
    Ok(weighted_second_moment(data, &second_moment_forest.weight_vector(u)?))
}

pub fn raw_cov(mean_forest: &Forest, second_moment_forest: &Forest, data: &Dataset, u: &[f64]) -> Result<DynCovEstimate> {
    check_forest(mean_forest, data, ResponseKind::Mean)?;
    check_forest(second_moment_forest, data, ResponseKind::SecondMoment)?;
    let alpha = mean_forest.weight_vector(u)?;
    let beta = second_moment_forest.weight_vector(u)?;
    Ok(DynCovEstimate {
        u: u.to_vec(),
        matrix: weighted_covariance(data, &alpha, &beta),
        stage: Stage::Raw,
    })
}

/// How the α (mean) and β (second-moment) forests are built.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FdcmForestConfig {
    pub forest: ForestConfig,
    /// Use one second-moment forest for both weightings.
    pub shared_trees: bool,
}

/// The trained α and β forests for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestPair {
    pub alpha: Forest,
    /// `None` when trees are shared; β then reuses `alpha`.
    pub beta: Option<Forest>,
}

impl ForestPair {
    /// Trains both forests. The α forest uses substream `("alpha", 0)` of the
    /// configured seed and the β forest `("beta", 0)`.
    pub fn train(data: &Dataset, config: &FdcmForestConfig) -> Result<Self> {
        let seed = config.forest.seed;
        let with_seed = |label: &str| ForestConfig {
            seed: rng::derive_seed(seed, label, 0),
            ..config.forest.clone()
        };
        if config.shared_trees {
            let alpha = train_forest(data, &with_seed("beta"), ResponseKind::SecondMoment)?;
            return Ok(Self { alpha, beta: None });
        }
        let (alpha, beta) = rayon::join(
            || train_forest(data, &with_seed("alpha"), ResponseKind::Mean),
            || train_forest(data, &with_seed("beta"), ResponseKind::SecondMoment),
        );
        Ok(Self {
            alpha: alpha?,
            beta: Some(beta?),
        })
    }

    pub fn beta(&self) -> &Forest {
        self.beta.as_ref().unwrap_or(&self.alpha)
    }

    pub fn raw_cov(&self, data: &Dataset, u: &[f64]) -> Result<DynCovEstimate> {
        raw_cov(&self.alpha, self.beta(), data, u)
    }

    /// Raw estimate at `u` built from held-out samples: each tree's leaf at
    /// `u` is repopulated with the held-out points that route into it.
    pub fn held_out_cov(&self, held_out: &Dataset, u: &[f64]) -> Result<DMatrix<f64>> {
        let alpha = routed_weights(&self.alpha, held_out, u)?;
        let beta = match &self.beta {
            Some(b) => routed_weights(b, held_out, u)?,
            None => alpha.clone(),
        };
        Ok(weighted_covariance(held_out, &alpha, &beta))
    }
}

/// Co-leaf weights of `points` with `u`, averaged over trees whose leaf at `u`
/// receives at least one point. Falls back to uniform weights when no tree does.
pub fn routed_weights(forest: &Forest, points: &Dataset, u: &[f64]) -> Result<WeightVector> {
    if u.len() != forest.d() || points.d() != forest.d() {
        return Err(Error::DimensionMismatch {
            expected: forest.d(),
            actual: u.len().max(points.d()),
        });
    }
    let rows: Vec<Vec<f64>> = (0..points.n()).map(|i| points.covariate_row(i)).collect();
    let mut dense = vec![0.0; points.n()];
    let mut used = 0usize;
    let mut members = Vec::new();
    for tree in &forest.trees {
        let target = tree.leaf_index(u);
        members.clear();
        members.extend((0..rows.len()).filter(|&i| tree.leaf_index(&rows[i]) == target));
        if members.is_empty() {
            continue;
        }
        used += 1;
        let w = 1.0 / members.len() as f64;
        for &i in &members {
            dense[i] += w;
        }
    }
    if used == 0 {
        let all: Vec<usize> = (0..points.n()).collect();
        return Ok(WeightVector::uniform(points.n(), &all));
    }
    let scale = 1.0 / used as f64;
    Ok(WeightVector {
        n: points.n(),
        entries: dense
            .into_iter()
            .enumerate()
            .filter(|e| e.1 > 0.0)
            .map(|(i, w)| (i, w * scale))
            .collect(),
    })
}
