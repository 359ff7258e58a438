use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::split::{best_split, gram, NodeData, TargetKernel};
use super::{ForestConfig, ResponseKind};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Uniform s-subset of `0..n` without replacement, returned sorted.
pub fn subsample(n: usize, s: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if s > n {
        return Err(Error::config(format!("subsample size {s} exceeds n = {n}")));
    }
    if s < 2 {
        return Err(Error::config("subsample size must be at least 2"));
    }
    let mut idx = index::sample(rng, n, s).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Random halves of `indices`: J1 gets ⌈m/2⌉ elements, J2 gets ⌊m/2⌋. Both
/// halves are returned sorted.
pub fn split_sample(indices: &[usize], rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: indices.len(),
        });
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let mut j2 = shuffled.split_off(indices.len().div_ceil(2));
    let mut j1 = shuffled;
    j1.sort_unstable();
    j2.sort_unstable();
    Ok((j1, j2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// J2 count of the node, kept for regularity audits.
        j2_count: usize,
    },
    Leaf {
        /// Dataset indices of the J2 points in this leaf.
        samples: Vec<usize>,
        /// More than 2k−1 J2 points with no feasible split.
        oversized: bool,
    },
}

/// An honest tree. Node 0 is the root; `u[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub j1: Vec<usize>,
    pub j2: Vec<usize>,
}

impl Tree {
    /// Index of the leaf node reached by `u`.
    pub fn leaf_index(&self, u: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if u[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return at,
            }
        }
    }

    /// J2 indices sharing a leaf with `u`.
    pub fn neighbors(&self, u: &[f64]) -> &[usize] {
        match &self.nodes[self.leaf_index(u)] {
            Node::Leaf { samples, .. } => samples,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&[usize], bool)> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { samples, oversized } => Some((samples.as_slice(), *oversized)),
            Node::Split { .. } => None,
        })
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct Pending {
    slot: usize,
    /// Positions into the tree's J1 list.
    j1_pos: Vec<usize>,
    /// Dataset indices.
    j2: Vec<usize>,
}

/// Grows one honest tree. Splits are chosen from J1 targets and J1
/// covariates; J2 covariates only enter feasibility counts and J2 targets are
/// never read.
pub fn grow_tree(
    data: &Dataset,
    j1: &[usize],
    j2: &[usize],
    kind: ResponseKind,
    config: &ForestConfig,
    rng: &mut Rng,
) -> Result<Tree> {
    if j2.len() < config.k {
        return Err(Error::InsufficientData {
            required: config.k,
            actual: j2.len(),
        });
    }
    let targets = data.responses().select_rows(j1);
    let kernel = match kind {
        ResponseKind::Mean => TargetKernel::Linear,
        ResponseKind::SecondMoment => TargetKernel::Squared,
    };
    let tree_gram = gram(&targets, kernel);
    let u = data.covariates();

    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut stack = vec![Pending {
        slot: 0,
        j1_pos: (0..j1.len()).collect(),
        j2: j2.to_vec(),
    }];
    while let Some(Pending { slot, j1_pos, j2 }) = stack.pop() {
        let j1_rows: Vec<usize> = j1_pos.iter().map(|&a| j1[a]).collect();
        let node = NodeData {
            j1_covariates: u.select_rows(&j1_rows),
            j1_gram: DMatrix::from_fn(j1_pos.len(), j1_pos.len(), |a, b| {
                tree_gram[(j1_pos[a], j1_pos[b])]
            }),
            j2_covariates: u.select_rows(&j2),
        };
        match best_split(&node, config, rng) {
            Some(split) => {
                let goes_left = |row: usize| u[(row, split.feature)] <= split.threshold;
                let (l1, r1): (Vec<usize>, Vec<usize>) =
                    j1_pos.iter().partition(|&&a| goes_left(j1[a]));
                let (l2, r2): (Vec<usize>, Vec<usize>) = j2.iter().partition(|&&i| goes_left(i));
                let (left, right) = (nodes.len(), nodes.len() + 1);
                nodes.push(None);
                nodes.push(None);
                nodes[slot] = Some(Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left,
                    right,
                    j2_count: j2.len(),
                });
                // Right pushed first so the left subtree is grown first.
                stack.push(Pending {
                    slot: right,
                    j1_pos: r1,
                    j2: r2,
                });
                stack.push(Pending {
                    slot: left,
                    j1_pos: l1,
                    j2: l2,
                });
            }
            None => {
                let oversized = j2.len() > 2 * config.k - 1;
                nodes[slot] = Some(Node::Leaf {
                    samples: j2,
                    oversized,
                });
            }
        }
    }
    Ok(Tree {
        nodes: nodes.into_iter().map(|n| n.expect("every slot filled")).collect(),
        j1: j1.to_vec(),
        j2: j2.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample(5, 5, &mut rng(0)).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = subsample(10, 4, &mut rng(9)).unwrap();
        let b = subsample(10, 4, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(subsample(3, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn split_sample_sizes_and_partition() {
        let six: Vec<usize> = (10..16).collect();
        let (a, b) = split_sample(&six, &mut rng(1)).unwrap();
        assert_eq!((a.len(), b.len()), (3, 3));
        let seven: Vec<usize> = (0..7).collect();
        let (a, b) = split_sample(&seven, &mut rng(2)).unwrap();
        assert_eq!((a.len(), b.len()), (4, 3));
        let mut union: Vec<usize> = a.iter().chain(&b).copied().collect();
        union.sort_unstable();
        assert_eq!(union, seven);
        assert!(split_sample(&[1], &mut rng(0)).is_err());
    }

    fn line_data() -> Dataset {
        // Responses jump from 0 to 10 at u = 0.5.
        let n = 40;
        let u = DMatrix::from_fn(n, 1, |i, _| (i as f64 + 0.5) / n as f64);
        let y = DMatrix::from_fn(n, 1, |i, _| if i < n / 2 { 0.0 } else { 10.0 });
        Dataset::new(y, u).unwrap()
    }

    #[test]
    fn forced_single_leaf() {
        let ds = line_data();
        let j1: Vec<usize> = (0..40).step_by(2).collect();
        let j2: Vec<usize> = (1..40).step_by(2).collect();
        let cfg = ForestConfig {
            k: 20,
            ..ForestConfig::default()
        };
        let t = grow_tree(&ds, &j1, &j2, ResponseKind::Mean, &cfg, &mut rng(0)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.neighbors(&[0.3]), j2.as_slice());
    }

    #[test]
    fn separable_data_gives_depth_one_tree() {
        let ds = line_data();
        let j1: Vec<usize> = (0..40).step_by(2).collect();
        let j2: Vec<usize> = (1..40).step_by(2).collect();
        let cfg = ForestConfig {
            k: 6,
            pi: 1e-300,
            ..ForestConfig::default()
        };
        let t = grow_tree(&ds, &j1, &j2, ResponseKind::Mean, &cfg, &mut rng(0)).unwrap();
        assert_eq!(t.depth(), 1);
        match &t.nodes[0] {
            Node::Split { threshold, .. } => assert!(*threshold > 0.45 && *threshold < 0.55),
            _ => panic!("root must split"),
        }
    }

    #[test]
    fn honesty_zeroing_j2_responses_changes_nothing() {
        let ds = line_data();
        let j1: Vec<usize> = (0..40).step_by(2).collect();
        let j2: Vec<usize> = (1..40).step_by(2).collect();
        let mut y = ds.responses().clone();
        for &i in &j2 {
            y.row_mut(i).fill(0.0);
        }
        let zeroed = Dataset::new(y, ds.covariates().clone()).unwrap();
        let cfg = ForestConfig {
            k: 2,
            ..ForestConfig::default()
        };
        for kind in [ResponseKind::Mean, ResponseKind::SecondMoment] {
            let a = grow_tree(&ds, &j1, &j2, kind, &cfg, &mut rng(5)).unwrap();
            let b = grow_tree(&zeroed, &j1, &j2, kind, &cfg, &mut rng(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn too_small_j2_is_an_error() {
        let ds = line_data();
        let cfg = ForestConfig {
            k: 5,
            ..ForestConfig::default()
        };
        assert!(grow_tree(&ds, &[0, 1, 2], &[3, 4], ResponseKind::Mean, &cfg, &mut rng(0)).is_err());
    }
}
