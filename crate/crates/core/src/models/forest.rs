//! Regression forest (bootstrap-aggregated CART trees with variance
//! splitting) and its mean-decrease-in-impurity importances.
//!
//! Each tree draws its bootstrap sample and per-node feature subsets from
//! its own generator, seeded with [`tree_seed`]. Candidate features at a
//! node are ordered by a keyed hash of the feature *name*, so a fitted
//! forest does not depend on the column order of the design matrix.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("need at least 2 samples to fit a forest, got {0}")]
    TooFewSamples(usize),
    #[error("design has {x_rows} rows but target has {y_len}")]
    LengthMismatch { x_rows: usize, y_len: usize },
    #[error("schema names {names} features but design has {cols} columns")]
    SchemaMismatch { names: usize, cols: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
    #[error("model expects {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    /// `None` means `ceil(p / 3)`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            min_samples_leaf: 2,
            max_depth: None,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn resolved_features_per_split(&self, p: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| p.div_ceil(3))
            .max(1)
    }

    fn validate(&self, p: usize) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig(
                "n_trees must be at least 1".into(),
            ));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::InvalidConfig(
                "min_samples_leaf must be at least 1".into(),
            ));
        }
        let m = self.resolved_features_per_split(p);
        if p == 0 || m > p || self.features_per_split == Some(0) {
            return Err(ForestError::InvalidConfig(format!(
                "features_per_split must lie in 1..={p}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
        n_samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        n_samples: usize,
        /// Parent variance minus the sample-weighted child variances.
        impurity_decrease: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub seed: u64,
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn is_leaf(&self) -> bool {
        self.nodes.len() == 1
    }

    fn root_samples(&self) -> usize {
        match self.nodes[0] {
            TreeNode::Leaf { n_samples, .. } | TreeNode::Split { n_samples, .. } => n_samples,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    at = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub feature_schema: Vec<String>,
    pub config: ForestConfig,
    pub trees: Vec<RegressionTree>,
}

impl ForestModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>, ForestError> {
        let p = self.feature_schema.len();
        if x.ncols() != p {
            return Err(ForestError::ShapeMismatch {
                expected: p,
                got: x.ncols(),
            });
        }
        let mut row = vec![0.0; p];
        Ok(DVector::from_fn(x.nrows(), |i, _| {
            row.iter_mut()
                .zip(x.row(i).iter())
                .for_each(|(r, v)| *r = *v);
            self.trees.iter().map(|t| t.predict_row(&row)).sum::<f64>() / self.trees.len() as f64
        }))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of tree `index`: `splitmix64(seed ^ splitmix64(index))`.
pub fn tree_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    y: &'a [f64],
    name_keys: &'a [u64],
    min_leaf: usize,
    max_depth: Option<usize>,
    per_split: usize,
}

impl TreeBuilder<'_> {
    fn grow(&self, seed: u64) -> RegressionTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.y.len();
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();

        let mut nodes = vec![TreeNode::Leaf {
            value: 0.0,
            n_samples: 0,
        }];
        let mut stack = vec![(0usize, sample, 0usize)];
        while let Some((id, idx, depth)) = stack.pop() {
            let n_node = idx.len();
            let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
            let mean = sum / n_node as f64;
            let leaf = TreeNode::Leaf {
                value: mean,
                n_samples: n_node,
            };

            let depth_ok = self.max_depth.is_none_or(|d| depth < d);
            let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
            if !depth_ok || pure || n_node < 2 * self.min_leaf {
                nodes[id] = leaf;
                continue;
            }
            let sse: f64 = idx.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
            match self.best_split(&idx, sum, sse, rng.next_u64()) {
                None => nodes[id] = leaf,
                Some(split) => {
                    let left = nodes.len();
                    let right = left + 1;
                    nodes.push(TreeNode::Leaf {
                        value: 0.0,
                        n_samples: 0,
                    });
                    nodes.push(TreeNode::Leaf {
                        value: 0.0,
                        n_samples: 0,
                    });
                    nodes[id] = TreeNode::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        n_samples: n_node,
                        impurity_decrease: split.gain / n_node as f64,
                        left,
                        right,
                    };
                    stack.push((right, split.right, depth + 1));
                    stack.push((left, split.left, depth + 1));
                }
            }
        }
        RegressionTree { seed, nodes }
    }

    /// Visit features in keyed-hash order; examine at least `per_split` of
    /// them and keep going only while no valid split has been found.
    fn best_split(&self, idx: &[usize], total: f64, sse: f64, salt: u64) -> Option<Split> {
        let mut order: Vec<usize> = (0..self.columns.len()).collect();
        order.sort_by_key(|&j| (splitmix64(salt ^ self.name_keys[j]), j));

        let n = idx.len() as f64;
        let base = total * total / n;
        let mut best: Option<(usize, f64, f64, usize)> = None; // feature, threshold, gain, cut
        let mut best_sorted = Vec::new();
        let mut sorted = idx.to_vec();

        for (visited, &j) in order.iter().enumerate() {
            if visited >= self.per_split && best.is_some() {
                break;
            }
            let col = &self.columns[j];
            sorted.copy_from_slice(idx);
            sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));

            let mut left_sum = 0.0;
            for cut in 1..sorted.len() {
                left_sum += self.y[sorted[cut - 1]];
                let (nl, nr) = (cut, sorted.len() - cut);
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (col[sorted[cut - 1]], col[sorted[cut]]);
                if lo >= hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain =
                    left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - base;
                if gain > 1e-12 * sse && best.is_none_or(|b| gain > b.2) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((j, threshold, gain, cut));
                    best_sorted.clone_from(&sorted);
                }
            }
        }

        best.map(|(feature, threshold, gain, cut)| Split {
            feature,
            threshold,
            gain,
            left: best_sorted[..cut].to_vec(),
            right: best_sorted[cut..].to_vec(),
        })
    }
}

/// Fit a forest on `x` (rows are samples) with column names `schema`.
pub fn fit_forest(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    schema: &[String],
    config: &ForestConfig,
) -> Result<ForestModel, ForestError> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(ForestError::LengthMismatch {
            x_rows: n,
            y_len: y.len(),
        });
    }
    if schema.len() != p {
        return Err(ForestError::SchemaMismatch {
            names: schema.len(),
            cols: p,
        });
    }
    if n < 2 {
        return Err(ForestError::TooFewSamples(n));
    }
    config.validate(p)?;
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(ForestError::NonFinite);
    }

    let columns: Vec<Vec<f64>> = x
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let y: Vec<f64> = y.iter().copied().collect();
    let name_keys: Vec<u64> = schema.iter().map(|s| name_key(s)).collect();
    let builder = TreeBuilder {
        columns: &columns,
        y: &y,
        name_keys: &name_keys,
        min_leaf: config.min_samples_leaf,
        max_depth: config.max_depth,
        per_split: config.resolved_features_per_split(p),
    };
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| builder.grow(tree_seed(config.seed, t)))
        .collect();

    Ok(ForestModel {
        feature_schema: schema.to_vec(),
        config: config.clone(),
        trees,
    })
}

/// Mean decrease in impurity per feature: for each tree, the sum over its
/// splits on feature `j` of (node fraction of the bootstrap sample) ×
/// (impurity decrease), averaged across trees and normalized to sum to one.
/// All zeros when no tree has a split.
pub fn mdi_importances(model: &ForestModel) -> Vec<f64> {
    let p = model.feature_schema.len();
    let mut totals = vec![0.0; p];
    for tree in &model.trees {
        let root = tree.root_samples() as f64;
        for node in &tree.nodes {
            if let TreeNode::Split {
                feature,
                n_samples,
                impurity_decrease,
                ..
            } = *node
            {
                totals[feature] += n_samples as f64 / root * impurity_decrease;
            }
        }
    }
    let n_trees = model.trees.len().max(1) as f64;
    totals.iter_mut().for_each(|v| *v /= n_trees);
    let sum: f64 = totals.iter().sum();
    if sum > 0.0 {
        totals.iter_mut().for_each(|v| *v /= sum);
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn signal_fixture(seed: u64, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)]);
        (x, y)
    }

    fn small_config(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            seed,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn constant_target_gives_leaf_trees() {
        let (x, _) = signal_fixture(0, 50);
        let y = DVector::from_element(50, 1.5);
        let f = fit_forest(&x, &y, &names(2), &small_config(0)).unwrap();
        assert!(f.trees.iter().all(RegressionTree::is_leaf));
        assert_eq!(mdi_importances(&f), vec![0.0, 0.0]);
        assert!(f.predict(&x).unwrap().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn informative_feature_dominates() {
        for seed in 0..5 {
            let (x, y) = signal_fixture(100 + seed, 500);
            let f = fit_forest(&x, &y, &names(2), &small_config(seed)).unwrap();
            let s = mdi_importances(&f);
            assert!(s[0] > 0.9, "seed {seed}: {s:?}");
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = signal_fixture(3, 120);
        let a = fit_forest(&x, &y, &names(2), &small_config(9)).unwrap();
        let b = fit_forest(&x, &y, &names(2), &small_config(9)).unwrap();
        assert_eq!(a, b);
        let c = fit_forest(&x, &y, &names(2), &small_config(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_have_nonnegative_decrease_and_leaf_means() {
        let (x, y) = signal_fixture(4, 80);
        let f = fit_forest(&x, &y, &names(2), &small_config(1)).unwrap();
        for tree in &f.trees {
            for node in &tree.nodes {
                match node {
                    TreeNode::Split {
                        impurity_decrease, ..
                    } => assert!(*impurity_decrease >= 0.0),
                    TreeNode::Leaf { n_samples, .. } => assert!(*n_samples >= 2),
                }
            }
        }
        // a single tree with bootstrap of identical rows still predicts leaf means
        let tree = &f.trees[0];
        let pred = tree.predict_row(&[x[(0, 0)], x[(0, 1)]]);
        assert!(pred.is_finite());
    }

    #[test]
    fn invariant_under_column_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 150;
        let x = DMatrix::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 1)] - x[(i, 3)] + 0.1 * x[(i, 0)]);
        let schema = vec![
            "TSc".to_string(),
            "OXIC".into(),
            "zTm".into(),
            "TPEC".into(),
        ];
        let perm = [2usize, 0, 3, 1];
        let xp = DMatrix::from_fn(n, 4, |i, c| x[(i, perm[c])]);
        let sp: Vec<String> = perm.iter().map(|&j| schema[j].clone()).collect();

        let cfg = ForestConfig {
            n_trees: 25,
            seed: 5,
            ..ForestConfig::default()
        };
        let a = fit_forest(&x, &y, &schema, &cfg).unwrap();
        let b = fit_forest(&xp, &y, &sp, &cfg).unwrap();
        assert_eq!(a.predict(&x).unwrap(), b.predict(&xp).unwrap());
        let (sa, sb) = (mdi_importances(&a), mdi_importances(&b));
        for (c, &j) in perm.iter().enumerate() {
            assert_eq!(sb[c], sa[j]);
        }
    }

    #[test]
    fn config_and_shape_errors() {
        let (x, y) = signal_fixture(0, 10);
        let bad = ForestConfig {
            features_per_split: Some(3),
            ..ForestConfig::default()
        };
        assert!(matches!(
            fit_forest(&x, &y, &names(2), &bad),
            Err(ForestError::InvalidConfig(_))
        ));
        let bad = ForestConfig {
            n_trees: 0,
            ..ForestConfig::default()
        };
        assert!(fit_forest(&x, &y, &names(2), &bad).is_err());
        let one = x.rows(0, 1).into_owned();
        assert_eq!(
            fit_forest(
                &one,
                &y.rows(0, 1).into_owned(),
                &names(2),
                &ForestConfig::default()
            ),
            Err(ForestError::TooFewSamples(1))
        );
        assert!(matches!(
            fit_forest(&x, &y, &names(3), &ForestConfig::default()),
            Err(ForestError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn max_depth_limits_growth() {
        let (x, y) = signal_fixture(2, 200);
        let cfg = ForestConfig {
            n_trees: 5,
            max_depth: Some(1),
            ..ForestConfig::default()
        };
        let f = fit_forest(&x, &y, &names(2), &cfg).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() <= 3));
    }
}
