use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::table::PixelTable;
use crate::error::{Error, Result};
use crate::simulator::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub trees: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub max_features: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_features: None,
            min_leaf: 5,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl RfConfig {
    pub fn features_per_split(&self, d: usize) -> usize {
        self.max_features.unwrap_or(d.div_ceil(3)).clamp(1, d.max(1))
    }
}

const LEAF: u32 = u32::MAX;

/// Split nodes send `x[feature] <= value` left; leaves hold their mean in `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Node {
    pub feature: u32,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub(crate) nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut n = &self.nodes[0];
        while n.feature != LEAF {
            n = if row[n.feature as usize] <= n.value {
                &self.nodes[n.left as usize]
            } else {
                &self.nodes[n.right as usize]
            };
        }
        n.value
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub config: RfConfig,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Out-of-bag RMSE over rows left out by at least one tree.
    pub oob_rmse: Option<f64>,
}

struct Split {
    score: f64,
    feature: usize,
    /// Rows `lo..lo + at` of the sorted order go left.
    at: usize,
    threshold: f64,
}

/// Grows one CART regression tree. Every feature keeps a list of sample
/// slots sorted by value; after a split each list is stably partitioned so
/// a node always owns the same contiguous range in all lists.
fn grow_tree(table: &PixelTable, config: &RfConfig, seed: u64) -> (Tree, Vec<bool>) {
    let (n, d) = (table.len(), table.n_features());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = if config.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut in_bag = vec![false; n];
    rows.iter().for_each(|&r| in_bag[r] = true);
    let y: Vec<f64> = rows.iter().map(|&r| table.targets()[r]).collect();
    let cols: Vec<Vec<f64>> = (0..d).map(|f| rows.iter().map(|&r| table.row(r)[f]).collect()).collect();
    let mut orders: Vec<Vec<u32>> = cols
        .iter()
        .map(|c| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            o
        })
        .collect();

    let mtry = config.features_per_split(d);
    let min_leaf = config.min_leaf.max(1);
    let mut features: Vec<usize> = (0..d).collect();
    let mut goes_left = vec![false; n];
    let mut scratch: Vec<u32> = Vec::with_capacity(n);
    let mut nodes = vec![Node {
        feature: LEAF,
        left: 0,
        right: 0,
        value: 0.0,
    }];
    let mut stack = vec![(0usize, 0usize, n)];
    while let Some((id, lo, hi)) = stack.pop() {
        let size = hi - lo;
        let slots = &orders.first().map_or(&[][..], |o| &o[lo..hi]);
        let (mut sum, mut ymin, mut ymax) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        let node_y: Vec<f64> = if d == 0 { y[lo..hi].to_vec() } else { slots.iter().map(|&s| y[s as usize]).collect() };
        for &v in &node_y {
            sum += v;
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
        let mean = sum / size as f64;
        nodes[id].value = mean;
        if d == 0 || size < 2 * min_leaf || ymin == ymax {
            continue;
        }
        let parent = sum * sum / size as f64;
        let sum_sq: f64 = node_y.iter().map(|v| v * v).sum();
        let eps = 1e-12 * sum_sq.max(1.0);

        features.shuffle(&mut rng);
        let mut best: Option<Split> = None;
        for (tried, &f) in features.iter().enumerate() {
            if tried >= mtry && best.is_some() {
                break;
            }
            let order = &orders[f][lo..hi];
            let col = &cols[f];
            let mut left_sum = 0.0;
            for j in 1..size {
                left_sum += y[order[j - 1] as usize];
                if j < min_leaf || size - j < min_leaf {
                    continue;
                }
                let (a, b) = (col[order[j - 1] as usize], col[order[j] as usize]);
                if a >= b {
                    continue;
                }
                let right_sum = sum - left_sum;
                let score = left_sum * left_sum / j as f64 + right_sum * right_sum / (size - j) as f64;
                if score > parent + eps && best.as_ref().map_or(true, |s| score > s.score) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Split {
                        score,
                        feature: f,
                        at: j,
                        threshold,
                    });
                }
            }
        }
        let Some(split) = best else { continue };

        for &s in &orders[split.feature][lo..lo + split.at] {
            goes_left[s as usize] = true;
        }
        for order in orders.iter_mut() {
            scratch.clear();
            let range = &mut order[lo..hi];
            let mut w = 0;
            for k in 0..size {
                let s = range[k];
                if goes_left[s as usize] {
                    range[w] = s;
                    w += 1;
                } else {
                    scratch.push(s);
                }
            }
            range[w..].copy_from_slice(&scratch);
        }
        for &s in &orders[split.feature][lo..lo + split.at] {
            goes_left[s as usize] = false;
        }

        let left = nodes.len();
        let leaf = Node {
            feature: LEAF,
            left: 0,
            right: 0,
            value: 0.0,
        };
        nodes.push(leaf);
        nodes.push(leaf);
        nodes[id] = Node {
            feature: split.feature as u32,
            left: left as u32,
            right: left as u32 + 1,
            value: split.threshold,
        };
        stack.push((left + 1, lo + split.at, hi));
        stack.push((left, lo, lo + split.at));
    }
    (Tree { nodes }, in_bag)
}

/// Bootstrap ensemble of regression trees with per-tree seeds derived from
/// `config.seed`; the result does not depend on scheduling.
pub fn rf_fit(table: &PixelTable, config: &RfConfig) -> Result<RandomForest> {
    if config.trees == 0 {
        return Err(Error::Usage("a forest needs at least one tree".into()));
    }
    let min_leaf = config.min_leaf.max(1);
    if table.len() < 2 * min_leaf {
        return Err(Error::Usage(format!(
            "{} rows cannot fill two leaves of {min_leaf}",
            table.len()
        )));
    }
    let grown: Vec<(Tree, Vec<bool>)> = (0..config.trees)
        .into_par_iter()
        .map(|t| grow_tree(table, config, splitmix64(config.seed ^ splitmix64(t as u64))))
        .collect();

    let n = table.len();
    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0u32; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_sum[i] += tree.predict_row(table.row(i));
            oob_count[i] += 1;
        }
    }
    let (sq, m) = (0..n)
        .filter(|&i| oob_count[i] > 0)
        .fold((0.0, 0usize), |(sq, m), i| {
            let r = oob_sum[i] / oob_count[i] as f64 - table.targets()[i];
            (sq + r * r, m + 1)
        });
    Ok(RandomForest {
        config: *config,
        n_features: table.n_features(),
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        oob_rmse: (m > 0).then(|| (sq / m as f64).sqrt()),
    })
}

impl RandomForest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }
}

pub fn rf_predict(forest: &RandomForest, rows: &[f64]) -> Result<Vec<f64>> {
    let d = forest.n_features;
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::Usage(format!("{} values do not form rows of {d} features", rows.len())));
    }
    Ok(rows.par_chunks(d).map(|r| forest.predict_row(r)).collect())
}
