//! Split search for gradient trees.
//!
//! Child heterogeneity is scored by
//! `Δ = ‖S₁/n₁ − S₂/n₂‖² · n₁n₂ / n_P²`, where S are child sums of the J1
//! targets. The search never touches targets directly: it works on the Gram
//! matrix `K_ab = ⟨t_a, t_b⟩` of the node's J1 targets, which for second-moment
//! targets `t = vec(yyᵀ)` is `(y_aᵀ y_b)²`. Sliding a threshold then costs
//! O(node size) per moved point instead of O(p²).

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;

use super::ForestConfig;
use crate::rng::Rng;

/// Δ evaluated from explicit child target sums.
pub fn delta_criterion(sum1: &[f64], n1: usize, sum2: &[f64], n2: usize, n_parent: usize) -> f64 {
    assert_eq!(sum1.len(), sum2.len());
    assert!(n1 >= 1 && n2 >= 1);
    let (a, b) = (n1 as f64, n2 as f64);
    let dist2: f64 = sum1
        .iter()
        .zip(sum2)
        .map(|(s1, s2)| {
            let diff = s1 / a - s2 / b;
            diff * diff
        })
        .sum();
    let np = n_parent as f64;
    dist2 * a * b / (np * np)
}

/// Δ from Gram block sums: `s11 = Σ_{C1×C1} K`, `s12 = Σ_{C1×C2} K`,
/// `s22 = Σ_{C2×C2} K`.
pub fn delta_from_gram(s11: f64, s12: f64, s22: f64, n1: usize, n2: usize, n_parent: usize) -> f64 {
    let (a, b) = (n1 as f64, n2 as f64);
    let dist2 = s11 / (a * a) + s22 / (b * b) - 2.0 * s12 / (a * b);
    let np = n_parent as f64;
    (dist2 * a * b / (np * np)).max(0.0)
}

/// Gram matrix of target rows. For [`TargetKernel::Squared`] the targets are
/// taken to be `vec(yyᵀ)` of the given rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKernel {
    Linear,
    Squared,
}

pub fn gram(rows: &DMatrix<f64>, kernel: TargetKernel) -> DMatrix<f64> {
    let mut g = rows * rows.transpose();
    if kernel == TargetKernel::Squared {
        g.apply(|v| *v = *v * *v);
    }
    g
}

/// Everything the split search may look at for one node: J1 covariates and
/// their Gram matrix, plus J2 covariates (for feasibility counts only).
#[derive(Debug, Clone)]
pub struct NodeData {
    /// m×d covariates of the node's J1 points.
    pub j1_covariates: DMatrix<f64>,
    /// m×m Gram matrix of the node's J1 targets.
    pub j1_gram: DMatrix<f64>,
    /// q×d covariates of the node's J2 points.
    pub j2_covariates: DMatrix<f64>,
}

impl NodeData {
    /// Builds node data from explicit m×t target rows.
    pub fn from_targets(targets: &DMatrix<f64>, j1_covariates: DMatrix<f64>, j2_covariates: DMatrix<f64>) -> Self {
        Self {
            j1_gram: gram(targets, TargetKernel::Linear),
            j1_covariates,
            j2_covariates,
        }
    }

    pub fn j1_len(&self) -> usize {
        self.j1_covariates.nrows()
    }

    pub fn j2_len(&self) -> usize {
        self.j2_covariates.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub delta: f64,
}

/// Smallest J2 count either child may hold.
pub fn min_child_j2(parent_j2: usize, config: &ForestConfig) -> usize {
    let omega_floor = (config.omega * parent_j2 as f64).ceil() as usize;
    config.k.max(omega_floor)
}

/// Best feasible threshold on one feature, with ties resolved to the lowest
/// threshold.
fn scan_feature(node: &NodeData, feature: usize, min_j2: usize, row_sums: &[f64], total: f64) -> Option<Split> {
    let m = node.j1_len();
    let q = node.j2_len();
    let k = &node.j1_gram;

    // (value, Some(j1 position) | None for a J2 point)
    let mut points: Vec<(f64, Option<usize>)> = Vec::with_capacity(m + q);
    points.extend((0..m).map(|a| (node.j1_covariates[(a, feature)], Some(a))));
    points.extend((0..q).map(|b| (node.j2_covariates[(b, feature)], None)));
    points.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut inner_left = vec![0.0; m];
    let (mut s11, mut left_total) = (0.0, 0.0);
    let (mut n1, mut q1) = (0usize, 0usize);
    let mut best: Option<Split> = None;

    let mut i = 0;
    while i < points.len() {
        let value = points[i].0;
        while i < points.len() && points[i].0 == value {
            match points[i].1 {
                Some(a) => {
                    s11 += 2.0 * inner_left[a] + k[(a, a)];
                    left_total += row_sums[a];
                    for (j, c) in inner_left.iter_mut().enumerate() {
                        *c += k[(j, a)];
                    }
                    n1 += 1;
                }
                None => q1 += 1,
            }
            i += 1;
        }
        if i == points.len() {
            break;
        }
        let next = points[i].0;
        let n2 = m - n1;
        if n1 == 0 || n2 == 0 || q1 < min_j2 || q - q1 < min_j2 {
            continue;
        }
        let mid = 0.5 * (value + next);
        let threshold = if mid < next { mid } else { value };
        let s12 = left_total - s11;
        let s22 = total - 2.0 * left_total + s11;
        let delta = delta_from_gram(s11, s12, s22, n1, n2, m);
        if best.is_none_or(|b| delta > b.delta) {
            best = Some(Split {
                feature,
                threshold,
                delta,
            });
        }
    }
    best
}

fn best_over(node: &NodeData, features: &[usize], min_j2: usize) -> Option<Split> {
    let row_sums: Vec<f64> = node.j1_gram.row_iter().map(|r| r.sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut best: Option<Split> = None;
    for &f in features {
        if let Some(s) = scan_feature(node, f, min_j2, &row_sums, total) {
            if best.is_none_or(|b| s.delta > b.delta) {
                best = Some(s);
            }
        }
    }
    best
}

/// Chooses the split for a node, or `None` when the node must become a leaf.
///
/// With probability `pi` a single feature is drawn uniformly and its best
/// threshold is used; otherwise `mtry` features are drawn and the best
/// (feature, threshold) among them wins. Every returned split leaves each
/// child with at least one J1 point and at least
/// `max(k, ⌈omega · node J2 count⌉)` J2 points. If the random feature admits
/// no feasible threshold the greedy draw is used instead.
pub fn best_split(node: &NodeData, config: &ForestConfig, rng: &mut Rng) -> Option<Split> {
    let d = node.j1_covariates.ncols();
    if node.j1_len() < 2 || node.j2_len() < 2 * config.k {
        return None;
    }
    let min_j2 = min_child_j2(node.j2_len(), config);

    if rng.random_bool(config.pi) {
        let f = rng.random_range(0..d);
        if let Some(s) = best_over(node, &[f], min_j2) {
            return Some(s);
        }
    }
    let mtry = config.mtry_for(d);
    let mut features = index::sample(rng, d, mtry).into_vec();
    features.sort_unstable();
    best_over(node, &features, min_j2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::vec_outer;
    use rand::SeedableRng;

    fn greedy_config(k: usize) -> ForestConfig {
        ForestConfig {
            k,
            pi: 1e-300,
            omega: 0.05,
            mtry: Some(usize::MAX),
            ..ForestConfig::default()
        }
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn delta_hand_example() {
        // C1 = {0, 0}, C2 = {2, 2}: ‖0 − 2‖² · (2·2)/4² = 1
        assert_eq!(delta_criterion(&[0.0], 2, &[4.0], 2, 4), 1.0);
        assert_eq!(delta_criterion(&[3.0, 3.0], 3, &[2.0, 2.0], 2, 5), 0.0);
        let a = delta_criterion(&[1.0, -2.0], 2, &[0.5, 7.0], 5, 7);
        let b = delta_criterion(&[0.5, 7.0], 5, &[1.0, -2.0], 2, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn gram_path_matches_naive_on_a_fixed_partition() {
        let ys = [[1.0, -0.5, 2.0], [0.3, 0.1, -1.0], [2.0, 2.0, 0.0], [-1.0, 0.5, 0.25]];
        let rows = DMatrix::from_fn(4, 3, |i, j| ys[i][j]);
        let k = gram(&rows, TargetKernel::Squared);
        let (c1, c2) = ([0usize, 2], [1usize, 3]);
        let sum = |idx: &[usize]| {
            let mut s = vec![0.0; 9];
            for &i in idx {
                for (acc, v) in s.iter_mut().zip(vec_outer(&ys[i])) {
                    *acc += v;
                }
            }
            s
        };
        let naive = delta_criterion(&sum(&c1), 2, &sum(&c2), 2, 4);
        let block = |a: &[usize], b: &[usize]| -> f64 {
            a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| k[(i, j)]).sum()
        };
        let fast = delta_from_gram(block(&c1, &c1), block(&c1, &c2), block(&c2, &c2), 2, 2, 4);
        assert!((naive - fast).abs() <= 1e-12 * naive.abs().max(1.0));
    }

    #[test]
    fn separable_one_dimensional_split() {
        // Exhaustive scan over the J1 partitions: {0}|{0,10,10} and
        // {0,0,10}|{10} both give (20/3)²·3/16 ≈ 8.33, {0,0}|{10,10} gives
        // 10²·4/16 = 25, so the maximizer separates {.1,.2} from {.8,.9}.
        let node = NodeData::from_targets(
            &col(&[0.0, 0.0, 10.0, 10.0]),
            col(&[0.1, 0.2, 0.8, 0.9]),
            col(&[0.05, 0.1, 0.15, 0.2, 0.25, 0.75, 0.8, 0.85, 0.9, 0.95]),
        );
        let mut rng = Rng::seed_from_u64(1);
        let s = best_split(&node, &greedy_config(2), &mut rng).unwrap();
        assert_eq!(s.feature, 0);
        assert!(s.threshold > 0.2 && s.threshold < 0.8, "{s:?}");
        assert!((s.delta - 25.0).abs() < 1e-9);
    }

    #[test]
    fn constant_targets_tie_break_to_lowest_threshold() {
        let node = NodeData::from_targets(
            &col(&[1.0; 4]),
            DMatrix::from_row_slice(4, 2, &[0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6]),
            DMatrix::from_row_slice(4, 2, &[0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6]),
        );
        let mut rng = Rng::seed_from_u64(3);
        let s = best_split(&node, &greedy_config(1), &mut rng).unwrap();
        assert_eq!(s.delta, 0.0);
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 0.15000000000000002);
    }

    #[test]
    fn too_few_j2_points_gives_leaf() {
        let k = 3;
        let node = NodeData::from_targets(
            &col(&[0.0, 1.0, 2.0, 3.0]),
            col(&[0.1, 0.2, 0.3, 0.4]),
            col(&[0.1, 0.2, 0.3, 0.4, 0.5]),
        );
        let mut rng = Rng::seed_from_u64(0);
        assert!(best_split(&node, &greedy_config(k), &mut rng).is_none());
    }

    #[test]
    fn omega_floor_dominates_k_for_large_nodes() {
        let cfg = ForestConfig {
            k: 2,
            omega: 0.2,
            ..ForestConfig::default()
        };
        assert_eq!(min_child_j2(100, &cfg), 20);
        assert_eq!(min_child_j2(6, &cfg), 2);
    }
}
