//! Randomized regression forest used as the BO surrogate.
//!
//! Tree `t` draws everything from `rng::child_rng(seed, &[t])` in this order:
//! `n` bootstrap indices (when bootstrapping), then for every node visited
//! depth-first (left child first) that is large enough to split, a partial
//! Fisher-Yates pass choosing its candidate features. Splits take the midpoint
//! with the largest squared-error reduction; ties keep the first found.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means `ceil(5 d / 6)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 30,
            min_leaf: 3,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Forest {
    trees: Vec<Node>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    max_features: usize,
    dim: usize,
}

impl Builder<'_> {
    fn build(&self, mut idx: Vec<usize>, rng: &mut ChaCha8Rng) -> Node {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        if idx.len() < 2 * self.min_leaf || idx.iter().all(|&i| self.y[i] == self.y[idx[0]]) {
            return Node::Leaf(mean);
        }
        let mut features: Vec<usize> = (0..self.dim).collect();
        for i in 0..self.max_features {
            let j = rng.gen_range(i..self.dim);
            features.swap(i, j);
        }
        features.truncate(self.max_features);

        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let n = idx.len();
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for split in 1..n {
                left_sum += self.y[idx[split - 1]];
                let (lo, hi) = (self.x[idx[split - 1]][f], self.x[idx[split]][f]);
                if split < self.min_leaf || n - split < self.min_leaf || lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                // Maximizing sum^2/count per side minimizes the children's SSE.
                let gain =
                    left_sum * left_sum / split as f64 + right_sum * right_sum / (n - split) as f64;
                if best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (lo + hi)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return Node::Leaf(mean);
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let mut left = left;
        let mut right = right;
        left.sort_unstable();
        right.sort_unstable();
        let left = self.build(left, rng);
        let right = self.build(right, rng);
        Node::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

impl Forest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::Empty("forest needs data".into()));
        }
        let dim = x[0].len();
        let max_features = params
            .max_features
            .unwrap_or_else(|| (5 * dim).div_ceil(6))
            .clamp(1, dim.max(1));
        let builder = Builder {
            x,
            y,
            min_leaf: params.min_leaf.max(1),
            max_features,
            dim,
        };
        let n = x.len();
        let trees = (0..params.n_trees.max(1))
            .map(|t| {
                let mut r = rng::child_rng(seed, &[t as u64]);
                let mut idx: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| r.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                idx.sort_unstable();
                builder.build(idx, &mut r)
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn tree_predictions(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    /// Mean and population variance across trees.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let preds = self.tree_predictions(x);
        let n = preds.len() as f64;
        let mean = preds.iter().sum::<f64>() / n;
        let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_grown_tree_interpolates() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64 * 0.1, (i * 7 % 5) as f64])
            .collect();
        let y: Vec<f64> = (0..20).map(|i| ((i * 13) % 11) as f64).collect();
        let params = ForestParams {
            n_trees: 1,
            min_leaf: 1,
            max_features: Some(2),
            bootstrap: false,
        };
        let f = Forest::fit(&x, &y, &params, 0).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(f.predict(xi).0, *yi);
        }
    }

    #[test]
    fn leaves_respect_min_size() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let params = ForestParams {
            n_trees: 1,
            min_leaf: 5,
            max_features: None,
            bootstrap: false,
        };
        let f = Forest::fit(&x, &y, &params, 0).unwrap();
        assert_eq!(f.predict(&[0.0]).0, 2.0);
        assert_eq!(f.predict(&[9.0]).0, 7.0);
    }
}
