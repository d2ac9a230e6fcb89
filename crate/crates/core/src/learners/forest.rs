use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_xy, Classifier, LocalityWeights, Regressor, WeightSource};
use crate::error::{CdteError, Result};
use crate::rng::{child_rng, Rng};

/// Which default `mtry` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestTask {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub mtry: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestParams {
    /// 100 bootstrapped trees, `min_leaf = max(1, n/20)`, and `mtry` of
    /// `d` for regression or `ceil(sqrt(d))` for classification.
    pub fn defaults(n: usize, d: usize, task: ForestTask, seed: u64) -> Self {
        let mtry = match task {
            ForestTask::Regression => d.max(1),
            ForestTask::Classification => (d as f64).sqrt().ceil() as usize,
        };
        ForestParams {
            n_trees: 100,
            min_leaf: (n / 20).max(1),
            mtry: mtry.clamp(1, d.max(1)),
            bootstrap: true,
            seed,
        }
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(CdteError::config("forest needs at least one tree"));
        }
        if self.min_leaf == 0 {
            return Err(CdteError::config("min_leaf must be at least 1"));
        }
        if self.mtry == 0 || self.mtry > d {
            return Err(CdteError::config(format!(
                "mtry must lie in 1..={d}, got {}",
                self.mtry
            )));
        }
        if n < 2 * self.min_leaf {
            return Err(CdteError::config(format!(
                "forest needs n >= 2 * min_leaf, got n = {n}, min_leaf = {}",
                self.min_leaf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        len: usize,
        value: f64,
    },
}

/// One CART tree. Leaf members index the training rows, repeated according
/// to their bootstrap multiplicity.
#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    members: Vec<u32>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> (usize, usize, f64) {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                Node::Leaf { start, len, value } => return (start, len, value),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    params: ForestParams,
    n: usize,
    d: usize,
}

impl Forest {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Training indices sharing a leaf with `x` in tree `t` (with multiplicity).
    pub fn leaf_members(&self, t: usize, x: &[f64]) -> &[u32] {
        let tree = &self.trees[t];
        let (start, len, _) = tree.leaf(x);
        &tree.members[start..start + len]
    }

    /// Leaf-co-membership weights: the average over trees of
    /// `count(i in leaf(x)) / |leaf(x)|`.
    pub fn weights_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|w| *w = 0.0);
        let scale = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            let (start, len, _) = tree.leaf(x);
            let share = scale / len as f64;
            for &i in &tree.members[start..start + len] {
                out[i as usize] += share;
            }
        }
    }
}

impl Regressor for Forest {
    fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.leaf(x).2).sum::<f64>() / self.trees.len() as f64
    }
    fn n_features(&self) -> usize {
        self.d
    }
    fn n_train(&self) -> usize {
        self.n
    }
}

impl WeightSource for Forest {
    fn weights(&self, x: &[f64]) -> LocalityWeights {
        let mut w = vec![0.0; self.n];
        self.weights_into(x, &mut w);
        // each tree contributes mass 1 / n_trees; renormalize away rounding
        LocalityWeights::from_raw(w).expect("forest leaves are non-empty")
    }
    fn n_train(&self) -> usize {
        self.n
    }
}

pub fn forest_weights(forest: &Forest, x: &[f64]) -> LocalityWeights {
    forest.weights(x)
}

/// Probability forest: a regression forest on 0/1 labels.
#[derive(Debug, Clone)]
pub struct ForestClassifier(pub Forest);

impl ForestClassifier {
    pub fn fit(x: &[Vec<f64>], a: &[u8], params: &ForestParams) -> Result<Self> {
        let ones = a.iter().filter(|&&v| v == 1).count();
        if ones == 0 || ones == a.len() {
            return Err(CdteError::Precondition(
                "forest classifier needs both classes in the training data".into(),
            ));
        }
        let y: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
        Ok(ForestClassifier(fit_forest(x, &y, params)?))
    }
}

impl Classifier for ForestClassifier {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.0.predict(x)
    }
}

/// Bagged CART regression trees with the variance-reduction criterion.
/// Trees are grown in parallel, each from its own seed derived from
/// `params.seed`, so results do not depend on the thread count.
pub fn fit_forest(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<Forest> {
    let d = check_xy(x, y.len())?;
    let n = y.len();
    params.validate(n, d)?;
    if y.iter().any(|v| !v.is_finite()) || x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CdteError::domain("forest inputs must be finite"));
    }
    // column-major copy for cache-friendly split search
    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.iter().map(|r| r[j]).collect()).collect();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = child_rng(params.seed, &[t as u64]);
            let sample: Vec<u32> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            grow_tree(&cols, y, sample, params, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        params: params.clone(),
        n,
        d,
    })
}

struct Builder<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
    members: Vec<u32>,
    features: Vec<usize>,
    // scratch: (feature value, target) pairs for the node under consideration
    scratch: Vec<(f64, f64)>,
}

fn grow_tree(cols: &[Vec<f64>], y: &[f64], sample: Vec<u32>, params: &ForestParams, rng: &mut Rng) -> Tree {
    let mut b = Builder {
        cols,
        y,
        min_leaf: params.min_leaf,
        mtry: params.mtry,
        nodes: Vec::new(),
        members: Vec::with_capacity(sample.len()),
        features: (0..cols.len()).collect(),
        scratch: Vec::with_capacity(sample.len()),
    };
    b.build(sample, rng);
    Tree {
        nodes: b.nodes,
        members: b.members,
    }
}

impl Builder<'_> {
    fn build(&mut self, idx: Vec<u32>, rng: &mut Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            start: 0,
            len: 0,
            value: 0.0,
        });
        match self.best_split(&idx, rng) {
            Some((feature, threshold)) => {
                let col = &self.cols[feature];
                let (l, r): (Vec<u32>, Vec<u32>) = idx.iter().partition(|&&i| col[i as usize] <= threshold);
                let left = self.build(l, rng);
                let right = self.build(r, rng);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                let value = idx.iter().map(|&i| self.y[i as usize]).sum::<f64>() / idx.len() as f64;
                let start = self.members.len();
                self.members.extend_from_slice(&idx);
                self.nodes[id] = Node::Leaf {
                    start,
                    len: idx.len(),
                    value,
                };
            }
        }
        id
    }

    /// Best variance-reduction split over `mtry` shuffled features, moving on
    /// to further features while none of the tried ones admits a valid split.
    fn best_split(&mut self, idx: &[u32], rng: &mut Rng) -> Option<(usize, f64)> {
        let m = idx.len();
        if m < 2 * self.min_leaf {
            return None;
        }
        let first = self.y[idx[0] as usize];
        if idx.iter().all(|&i| self.y[i as usize] == first) {
            return None;
        }
        let total: f64 = idx.iter().map(|&i| self.y[i as usize]).sum();
        let parent_score = total * total / m as f64;
        self.features.shuffle(rng);
        let mut best: Option<(usize, f64, f64)> = None;
        for (tried, fi) in (0..self.features.len()).enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            let feature = self.features[fi];
            let col = &self.cols[feature];
            self.scratch.clear();
            self.scratch
                .extend(idx.iter().map(|&i| (col[i as usize], self.y[i as usize])));
            self.scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 0..m - 1 {
                left_sum += self.scratch[k].1;
                let nl = k + 1;
                let nr = m - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                let (v, next) = (self.scratch[k].0, self.scratch[k + 1].0);
                if v == next {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                if score > parent_score + 1e-12 * parent_score.abs() && best.map_or(true, |b| score > b.2) {
                    let mut threshold = 0.5 * (v + next);
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((feature, threshold, score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn uniform_x(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn constant_target_predicts_constant() {
        let x = uniform_x(100, 3, 1);
        let f = fit_forest(
            &x,
            &[2.5; 100],
            &ForestParams::defaults(100, 3, ForestTask::Regression, 0),
        )
        .unwrap();
        for q in uniform_x(20, 3, 2) {
            assert_eq!(f.predict(&q), 2.5);
        }
    }

    #[test]
    fn learns_linear_signal() {
        let x = uniform_x(2000, 3, 3);
        let y: Vec<f64> = x.iter().map(|r| r[1]).collect();
        let params = ForestParams {
            min_leaf: 100,
            ..ForestParams::defaults(2000, 3, ForestTask::Regression, 9)
        };
        let f = fit_forest(&x, &y, &params).unwrap();
        let test = uniform_x(1000, 3, 4);
        let mse: f64 = test.iter().map(|r| (f.predict(r) - r[1]).powi(2)).sum::<f64>() / 1000.0;
        let var = 1.0 / 12.0;
        assert!(mse < var / 2.0, "mse {mse}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let x = uniform_x(300, 4, 5);
        let y: Vec<f64> = x.iter().map(|r| r[0] * r[1]).collect();
        let p = ForestParams::defaults(300, 4, ForestTask::Regression, 77);
        let a = fit_forest(&x, &y, &p).unwrap();
        let b = fit_forest(&x, &y, &p).unwrap();
        for q in uniform_x(50, 4, 6) {
            assert_eq!(a.predict(&q).to_bits(), b.predict(&q).to_bits());
        }
    }

    #[test]
    fn too_few_rows_for_min_leaf() {
        let x = uniform_x(10, 2, 7);
        let p = ForestParams {
            min_leaf: 6,
            ..ForestParams::defaults(10, 2, ForestTask::Regression, 0)
        };
        assert!(matches!(fit_forest(&x, &[0.0; 10], &p), Err(CdteError::Config(_))));
    }

    #[test]
    fn single_leaf_gives_uniform_weights() {
        let x = uniform_x(10, 2, 8);
        let p = ForestParams {
            n_trees: 1,
            min_leaf: 5,
            mtry: 2,
            bootstrap: false,
            seed: 0,
        };
        let f = fit_forest(&x, &[1.0; 10], &p).unwrap();
        let w = forest_weights(&f, &[0.5, 0.5]);
        assert!(w.as_slice().iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn weights_concentrate_on_leaf_members() {
        let x = uniform_x(50, 2, 9);
        let y: Vec<f64> = x.iter().map(|r| if r[0] > 0.5 { 1.0 } else { 0.0 }).collect();
        let p = ForestParams {
            n_trees: 1,
            min_leaf: 5,
            mtry: 2,
            bootstrap: false,
            seed: 1,
        };
        let f = fit_forest(&x, &y, &p).unwrap();
        let q = [0.9, 0.2];
        let members: std::collections::HashSet<u32> = f.leaf_members(0, &q).iter().copied().collect();
        let w = forest_weights(&f, &q);
        for (i, wi) in w.as_slice().iter().enumerate() {
            if members.contains(&(i as u32)) {
                assert!(*wi > 0.0);
            } else {
                assert_eq!(*wi, 0.0);
            }
        }
    }

    #[test]
    fn every_sampled_index_lands_in_one_leaf_per_tree() {
        let x = uniform_x(200, 3, 10);
        let y: Vec<f64> = x.iter().map(|r| r[2]).collect();
        let f = fit_forest(&x, &y, &ForestParams::defaults(200, 3, ForestTask::Regression, 3)).unwrap();
        for tree in &f.trees {
            assert_eq!(tree.members.len(), 200);
            for node in &tree.nodes {
                if let Node::Leaf { len, .. } = node {
                    assert!(*len >= f.params.min_leaf);
                }
            }
        }
    }

    #[test]
    fn weights_are_normalized() {
        let x = uniform_x(300, 3, 11);
        let y: Vec<f64> = x.iter().map(|r| r[0] + r[1]).collect();
        let f = fit_forest(&x, &y, &ForestParams::defaults(300, 3, ForestTask::Regression, 4)).unwrap();
        for q in uniform_x(30, 3, 12) {
            let w = forest_weights(&f, &q);
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.as_slice().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn classifier_outputs_are_clipped() {
        let x = uniform_x(200, 2, 13);
        let a: Vec<u8> = x.iter().map(|r| u8::from(r[0] > 0.5)).collect();
        let c = ForestClassifier::fit(&x, &a, &ForestParams::defaults(200, 2, ForestTask::Classification, 5)).unwrap();
        for q in uniform_x(50, 2, 14) {
            let p = c.predict_proba(&q);
            assert!((0.01..=0.99).contains(&p));
        }
    }
}
