//! Bagged classification trees with out-of-bag permutation importance.
//!
//! Each tree is grown on a bootstrap resample of the training rows to pure
//! leaves (subject to `min_leaf`), choosing every split by Gini impurity over
//! a fresh random subset of `max_features_per_split` features. The rows a
//! tree never saw form its out-of-bag (OOB) set.
//!
//! Importance of feature `j` is the per-tree increase in OOB error when `j`
//! is shuffled among that tree's OOB rows, averaged over trees and divided by
//! the standard deviation of the increase across trees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::Class;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankAggregation {
    /// Average of per-vector ranks (1 = most important).
    MeanRank,
    /// Average of raw importances, ranked once at the end.
    MeanImportance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_trees: usize,
    pub n_iterations: usize,
    /// `None` means `ceil(sqrt(n_features))`.
    pub max_features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
    pub aggregation: RankAggregation,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            n_iterations: 10,
            max_features_per_split: None,
            min_leaf: 1,
            seed: 0,
            aggregation: RankAggregation::MeanRank,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.n_trees == 0 || self.n_iterations == 0 || self.min_leaf == 0 {
            return Err(TrainingError::InvalidConfig(
                "n_trees, n_iterations and min_leaf must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn features_per_split(&self, n_features: usize) -> usize {
        self.max_features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        class: Class,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> Class {
        self.predict_with(|j| row[j])
    }

    /// Prediction with features supplied by `value`.
    pub fn predict_with(&self, value: impl Fn(usize) -> f64) -> Class {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if value(feature) <= threshold { left } else { right },
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    /// Out-of-bag row indices of each tree, ascending.
    pub oob: Vec<Vec<usize>>,
    pub n_features: usize,
    pub seed: u64,
}

impl TreeEnsemble {
    /// Majority vote; ties go to Baseline.
    pub fn predict(&self, row: &[f64]) -> Class {
        let yes = self.trees.iter().filter(|t| t.predict(row) == Class::Modulated).count();
        if 2 * yes > self.trees.len() {
            Class::Modulated
        } else {
            Class::Baseline
        }
    }

    /// Ensemble OOB error: each row is voted on only by the trees that did
    /// not see it. Rows with no OOB tree are skipped.
    pub fn oob_error(&self, features: &[Vec<f64>], labels: &[Class]) -> Option<f64> {
        let mut votes = vec![(0usize, 0usize); features.len()];
        for (tree, oob) in self.trees.iter().zip(&self.oob) {
            for &i in oob {
                match tree.predict(&features[i]) {
                    Class::Modulated => votes[i].0 += 1,
                    Class::Baseline => votes[i].1 += 1,
                }
            }
        }
        let (mut wrong, mut counted) = (0usize, 0usize);
        for (i, &(yes, no)) in votes.iter().enumerate() {
            if yes + no == 0 {
                continue;
            }
            counted += 1;
            let predicted = if yes > no { Class::Modulated } else { Class::Baseline };
            if predicted != labels[i] {
                wrong += 1;
            }
        }
        (counted > 0).then(|| wrong as f64 / counted as f64)
    }
}

fn check_labels(labels: &[Class], min_per_class: usize) -> Result<(), TrainingError> {
    let yes = labels.iter().filter(|&&c| c == Class::Modulated).count();
    let no = labels.len() - yes;
    if yes.min(no) < min_per_class {
        return Err(TrainingError::DegenerateLabels {
            modulated: yes,
            baseline: no,
        });
    }
    Ok(())
}

/// RNG for one tree: the ensemble seed selects the key, the tree index the stream.
fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

pub fn train_bagged_trees(
    features: &[Vec<f64>],
    labels: &[Class],
    config: &EnsembleConfig,
) -> Result<TreeEnsemble, TrainingError> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(TrainingError::LengthMismatch {
            rows: features.len(),
            labels: labels.len(),
        });
    }
    check_labels(labels, 2)?;
    let n = features.len();
    let n_features = features[0].len();
    let columns: Vec<Vec<f64>> = (0..n_features)
        .map(|j| features.iter().map(|r| r[j]).collect())
        .collect();
    let mtry = config.features_per_split(n_features);

    let mut trees = Vec::with_capacity(config.n_trees);
    let mut oob = Vec::with_capacity(config.n_trees);
    for t in 0..config.n_trees {
        let mut rng = tree_rng(config.seed, t);
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        sample.iter().for_each(|&i| in_bag[i] = true);
        oob.push((0..n).filter(|&i| !in_bag[i]).collect());
        trees.push(grow_tree(&columns, labels, sample, mtry, config.min_leaf, &mut rng));
    }
    Ok(TreeEnsemble {
        trees,
        oob,
        n_features,
        seed: config.seed,
    })
}

fn gini(yes: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = yes as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

fn majority(labels: &[Class], rows: &[usize]) -> (Class, usize) {
    let yes = rows.iter().filter(|&&i| labels[i] == Class::Modulated).count();
    let class = if 2 * yes > rows.len() {
        Class::Modulated
    } else {
        Class::Baseline
    };
    (class, yes)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn grow_tree(
    columns: &[Vec<f64>],
    labels: &[Class],
    sample: Vec<usize>,
    mtry: usize,
    min_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n_features = columns.len();
    let mut nodes: Vec<Node> = vec![Node::Leaf { class: Class::Baseline }];
    let mut stack = vec![(0usize, sample)];
    let mut order: Vec<usize> = (0..n_features).collect();
    let mut pairs: Vec<(f64, bool)> = Vec::new();

    while let Some((slot, rows)) = stack.pop() {
        let (class, yes) = majority(labels, &rows);
        let total = rows.len();
        if yes == 0 || yes == total || total < 2 * min_leaf {
            nodes[slot] = Node::Leaf { class };
            continue;
        }
        order.shuffle(rng);
        let mut best: Option<BestSplit> = None;
        for &feature in &order[..mtry] {
            pairs.clear();
            pairs.extend(
                rows.iter()
                    .map(|&i| (columns[feature][i], labels[i] == Class::Modulated)),
            );
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_yes = 0;
            for k in 0..total - 1 {
                if pairs[k].1 {
                    left_yes += 1;
                }
                let left_n = k + 1;
                if pairs[k].0 == pairs[k + 1].0 || left_n < min_leaf || total - left_n < min_leaf {
                    continue;
                }
                let right_n = total - left_n;
                let score = left_n as f64 * gini(left_yes, left_n) + right_n as f64 * gini(yes - left_yes, right_n);
                if best.as_ref().is_none_or(|b| score < b.score) {
                    let (lo, hi) = (pairs[k].0, pairs[k + 1].0);
                    let mid = lo + (hi - lo) / 2.0;
                    // Guard against midpoints that round onto the upper value.
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        score,
                    });
                }
            }
        }
        let Some(split) = best else {
            nodes[slot] = Node::Leaf { class };
            continue;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| columns[split.feature][i] <= split.threshold);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf { class });
        nodes.push(Node::Leaf { class });
        nodes[slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        stack.push((right, right_rows));
        stack.push((left, left_rows));
    }
    Tree { nodes }
}

/// How OOB values of the probed feature are reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permutation {
    Shuffle {
        seed: u64,
    },
    /// No reordering; every importance is then exactly zero.
    Identity,
}

/// Normalized OOB permutation importance per feature.
pub fn oob_importance(
    ensemble: &TreeEnsemble,
    features: &[Vec<f64>],
    labels: &[Class],
    permutation: Permutation,
) -> Result<Vec<f64>, TrainingError> {
    let p = ensemble.n_features;
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); p];
    for (t, (tree, oob)) in ensemble.trees.iter().zip(&ensemble.oob).enumerate() {
        if oob.is_empty() {
            continue;
        }
        let m = oob.len() as f64;
        let errors = |predict: &dyn Fn(usize) -> Class| {
            oob.iter()
                .enumerate()
                .filter(|&(k, &i)| predict(k) != labels[i])
                .count() as f64
                / m
        };
        let base = errors(&|k| tree.predict(&features[oob[k]]));
        let mut rng = match permutation {
            Permutation::Shuffle { seed } => Some(tree_rng(seed, t)),
            Permutation::Identity => None,
        };
        for (j, d) in deltas.iter_mut().enumerate() {
            let mut source: Vec<usize> = oob.clone();
            if let Some(rng) = rng.as_mut() {
                source.shuffle(rng);
            }
            let permuted = errors(&|k| {
                let row = &features[oob[k]];
                let swapped = features[source[k]][j];
                tree.predict_with(|f| if f == j { swapped } else { row[f] })
            });
            d.push(permuted - base);
        }
    }
    if deltas.first().is_none_or(Vec::is_empty) {
        return Err(TrainingError::EmptyOob);
    }
    Ok(deltas
        .iter()
        .map(|d| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            if d.len() < 2 {
                return 0.0;
            }
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if sd > 0.0 {
                mean / sd
            } else {
                0.0
            }
        })
        .collect())
}

/// Ranks with 1 = largest value; tied values share their average rank.
pub fn ranks_descending(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}
