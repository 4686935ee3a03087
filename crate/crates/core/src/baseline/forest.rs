use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        let m = match self {
            Self::Sqrt => (n_features as f64).sqrt().round() as usize,
            Self::All => n_features,
            Self::Count(c) => c,
        };
        m.clamp(1, n_features.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class proportions of the training rows reaching the leaf.
    Leaf { distribution: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn distribution(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { distribution } => return distribution,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

/// Bagged CART ensemble, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub n_classes: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Grower<'a> {
    x: &'a Tensor<f64>,
    y: &'a [usize],
    n_classes: usize,
    config: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        rows.iter().for_each(|&r| counts[self.y[r]] += 1);
        let n = rows.len() as f64;
        self.nodes.push(Node::Leaf {
            distribution: counts.iter().map(|&c| c as f64 / n).collect(),
        });
        self.nodes.len() - 1
    }

    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64, f64)> {
        let n = rows.len();
        let min_leaf = self.config.min_samples_leaf;
        let mut total = vec![0usize; self.n_classes];
        rows.iter().for_each(|&r| total[self.y[r]] += 1);
        let parent = gini(&total, n);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut features: Vec<usize> = sample(rng, self.x.shape()[1], self.mtry).into_vec();
        features.sort_unstable();
        let mut order = rows.to_vec();
        for f in features {
            order.sort_by(|&a, &b| self.x.at2(a, f).total_cmp(&self.x.at2(b, f)).then(a.cmp(&b)));
            let mut left = vec![0usize; self.n_classes];
            for i in 0..n - 1 {
                left[self.y[order[i]]] += 1;
                let (lv, rv) = (self.x.at2(order[i], f), self.x.at2(order[i + 1], f));
                let nl = i + 1;
                if lv == rv || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let impurity = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                let gain = parent - impurity;
                if gain > 1e-12 && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((f, lv + (rv - lv) / 2.0, gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let first = self.y[rows[0]];
        let pure = rows.iter().all(|&r| self.y[r] == first);
        let capped = self.config.max_depth.is_some_and(|d| depth >= d);
        if pure || capped || rows.len() < 2 * self.config.min_samples_leaf {
            return self.leaf(&rows);
        }
        let Some((feature, threshold, _)) = self.best_split(&rows, rng) else {
            return self.leaf(&rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x.at2(i, feature) <= threshold);
        let idx = self.nodes.len();
        self.nodes.push(Node::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[idx] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }
}

/// Tree `i` draws from stream `i` of a generator seeded with the master seed.
pub fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

pub fn train_forest(x: &Tensor<f64>, y: &[usize], n_classes: usize, config: &ForestConfig) -> Result<Forest, BaselineError> {
    let (n, d) = x.dims2("train_forest")?;
    if config.n_trees == 0 || config.min_samples_leaf == 0 {
        return Err(BaselineError::Config("n_trees and min_samples_leaf must be at least 1".into()));
    }
    if y.len() != n || n == 0 {
        return Err(BaselineError::Config(format!("{n} feature rows for {} labels", y.len())));
    }
    crate::probe::check_labels(y, n_classes).map_err(|e| BaselineError::Labels(e.to_string()))?;
    let mtry = config.max_features.resolve(d);
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(config.seed, t);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut g = Grower {
                x,
                y,
                n_classes,
                config,
                mtry,
                nodes: Vec::new(),
            };
            g.grow(rows, 0, &mut rng);
            Tree { nodes: g.nodes }
        })
        .collect();
    Ok(Forest {
        n_features: d,
        n_classes,
        config: config.clone(),
        trees,
    })
}

impl Forest {
    /// Mean of per-tree leaf distributions.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, BaselineError> {
        if x.len() != self.n_features {
            return Err(BaselineError::Config(format!(
                "feature vector has {} entries, forest expects {}",
                x.len(),
                self.n_features
            )));
        }
        let mut p = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, &b) in p.iter_mut().zip(t.distribution(x)) {
                *a += b;
            }
        }
        let k = self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v /= k);
        Ok(p)
    }

    pub fn predict_batch(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, BaselineError> {
        let (n, _) = x.dims2("forest_predict")?;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| self.predict(x.row(i)))
            .collect::<Result<_, _>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BaselineError> {
        serde_json::from_str(s).map_err(|e| BaselineError::Config(e.to_string()))
    }
}
