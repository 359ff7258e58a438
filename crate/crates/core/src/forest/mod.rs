//! Honest, subsampled gradient forests and their similarity weights.
//!
//! Each tree draws a subsample of size `s`, splits it into halves J1 and J2,
//! places splits using J1 only, and stores J2 indices in its leaves. The weight
//! of training point i at a query u is the average over trees of
//! `1{i ∈ leaf_b(u)} / |leaf_b(u)|`, counting only J2 points.

pub mod split;
pub mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Fingerprint};
use crate::error::{Error, Result};
use crate::rng;

pub use split::{best_split, delta_criterion, delta_from_gram, NodeData, Split};
pub use tree::{grow_tree, split_sample, subsample, Node, Tree};

/// Which target the trees are grown for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseKind {
    /// Targets Yᵢ; weights estimate the conditional mean.
    Mean,
    /// Targets vec(YᵢYᵢᵀ); weights estimate the conditional second moment.
    SecondMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    /// Number of trees.
    pub trees: usize,
    /// Subsample size; `None` means ⌈n/2⌉.
    pub subsample: Option<usize>,
    /// Minimum J2 points per leaf.
    pub k: usize,
    /// Minimum fraction of the parent's J2 points each child must keep.
    pub omega: f64,
    /// Probability that a split uses one uniformly drawn feature.
    pub pi: f64,
    /// Candidate features per greedy split; `None` means ⌈√d⌉.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 500,
            subsample: None,
            k: 5,
            omega: 0.05,
            pi: 0.05,
            mtry: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn subsample_for(&self, n: usize) -> usize {
        self.subsample.unwrap_or(n.div_ceil(2))
    }

    pub fn mtry_for(&self, d: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d)
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let s = self.subsample_for(n);
        if self.trees == 0 {
            return Err(Error::config("tree count must be at least 1"));
        }
        if s < 2 || s > n {
            return Err(Error::config(format!("subsample size {s} must lie in [2, n = {n}]")));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if s / 2 < self.k {
            return Err(Error::config(format!(
                "J2 half of a size-{s} subsample holds {} points, fewer than k = {}",
                s / 2,
                self.k
            )));
        }
        if !(self.omega > 0.0 && self.omega <= 0.2) {
            return Err(Error::config("omega must lie in (0, 0.2]"));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::config("pi must lie in (0, 1]"));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > d {
                return Err(Error::config(format!("mtry must lie in [1, d = {d}]")));
            }
        }
        Ok(())
    }
}

/// Sparse, nonnegative weights over training indices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub n: usize,
    /// (index, weight) pairs sorted by index, weights > 0.
    pub entries: Vec<(usize, f64)>,
}

impl WeightVector {
    pub fn get(&self, i: usize) -> f64 {
        self.entries
            .binary_search_by_key(&i, |e| e.0)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, w) in &self.entries {
            out[i] = w;
        }
        out
    }

    /// Uniform weights over `indices`.
    pub fn uniform(n: usize, indices: &[usize]) -> Self {
        let w = 1.0 / indices.len() as f64;
        let mut entries: Vec<(usize, f64)> = indices.iter().map(|&i| (i, w)).collect();
        entries.sort_by_key(|e| e.0);
        Self { n, entries }
    }
}

const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format_version: u32,
    pub config: ForestConfig,
    pub kind: ResponseKind,
    pub fingerprint: Fingerprint,
    pub trees: Vec<Tree>,
}

/// Grows `config.trees` honest trees. Tree b uses the substream
/// `("tree", b)` of `config.seed`, so the result does not depend on how many
/// threads build it.
pub fn train_forest(data: &Dataset, config: &ForestConfig, kind: ResponseKind) -> Result<Forest> {
    config.validate(data.n(), data.d())?;
    let s = config.subsample_for(data.n());
    let trees = (0..config.trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::substream(config.seed, "tree", b as u64);
            let sub = subsample(data.n(), s, &mut rng)?;
            let (j1, j2) = split_sample(&sub, &mut rng)?;
            grow_tree(data, &j1, &j2, kind, config, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest {
        format_version: FOREST_FORMAT_VERSION,
        config: config.clone(),
        kind,
        fingerprint: data.fingerprint(),
        trees,
    })
}

impl Forest {
    pub fn n(&self) -> usize {
        self.fingerprint.n
    }

    pub fn d(&self) -> usize {
        self.fingerprint.d
    }

    /// Similarity weights at `u`. Trees whose leaf at `u` holds no J2 point
    /// are skipped, so the weights always sum to one.
    pub fn weight_vector(&self, u: &[f64]) -> Result<WeightVector> {
        if u.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                actual: u.len(),
            });
        }
        let mut dense = vec![0.0; self.n()];
        let mut used = 0usize;
        for tree in &self.trees {
            let leaf = tree.neighbors(u);
            if leaf.is_empty() {
                continue;
            }
            used += 1;
            let w = 1.0 / leaf.len() as f64;
            for &i in leaf {
                dense[i] += w;
            }
        }
        let scale = 1.0 / used.max(1) as f64;
        let entries = dense
            .into_iter()
            .enumerate()
            .filter(|e| e.1 > 0.0)
            .map(|(i, w)| (i, w * scale))
            .collect();
        Ok(WeightVector { n: self.n(), entries })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: Forest = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if forest.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported forest format version {}",
                forest.format_version
            )));
        }
        Ok(forest)
    }
}
