//! Least-squares gradient boosting with exact, presorted splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Bounds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            trees: 300,
            max_depth: 5,
            shrinkage: 0.1,
            min_samples_leaf: 1,
        }
    }
}

/// Array-encoded regression tree. Node 0 is the root; `feature < 0` marks a
/// leaf. Rows with `x[feature] < threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        while self.feature[node] >= 0 {
            node = if x[self.feature[node] as usize] < self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        self.value[node]
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &RegressionTree, n: usize) -> usize {
            if t.feature[n] < 0 {
                0
            } else {
                1 + walk(t, t.left[n] as usize).max(walk(t, t.right[n] as usize))
            }
        }
        walk(self, 0)
    }

    fn leaf(&mut self, value: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedTreeModel {
    pub init: f64,
    pub shrinkage: f64,
    pub trees: Vec<RegressionTree>,
    pub max_depth: usize,
    /// Predictions are clipped into `[clip_lo, clip_hi]`.
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl BoostedTreeModel {
    pub fn predict_raw(&self, x: &[f64], n_trees: usize) -> f64 {
        self.init
            + self.shrinkage
                * self.trees[..n_trees.min(self.trees.len())]
                    .iter()
                    .map(|t| t.predict(x))
                    .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x, self.trees.len()).clamp(self.clip_lo, self.clip_hi)
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Per-node running state while scanning one feature's sorted order.
#[derive(Clone, Copy, Default)]
struct Scan {
    count: usize,
    sum: f64,
    last: f64,
}

fn fit_tree(
    x: &[Vec<f64>],
    sorted: &[Vec<u32>],
    residual: &[f64],
    cfg: &BoostConfig,
    node_of: &mut [u32],
) -> RegressionTree {
    let n = residual.len();
    let d = sorted.len();
    let mut tree = RegressionTree {
        feature: vec![],
        threshold: vec![],
        left: vec![],
        right: vec![],
        value: vec![],
    };
    let total: f64 = residual.iter().sum();
    tree.leaf(total / n as f64);
    node_of.iter_mut().for_each(|v| *v = 0);
    let mut frontier: Vec<usize> = vec![0];

    for _depth in 0..cfg.max_depth {
        if frontier.is_empty() {
            break;
        }
        let nodes = tree.feature.len();
        // slot of each frontier node, or usize::MAX
        let mut slot = vec![usize::MAX; nodes];
        for (s, &node) in frontier.iter().enumerate() {
            slot[node] = s;
        }
        let m = frontier.len();
        let mut count = vec![0usize; m];
        let mut sum = vec![0.0; m];
        for i in 0..n {
            let s = slot[node_of[i] as usize];
            if s != usize::MAX {
                count[s] += 1;
                sum[s] += residual[i];
            }
        }
        let mut best: Vec<Option<Split>> = (0..m).map(|_| None).collect();
        for (f, order) in sorted.iter().enumerate().take(d) {
            let mut scan = vec![Scan::default(); m];
            for &i in order {
                let i = i as usize;
                let s = slot[node_of[i] as usize];
                if s == usize::MAX {
                    continue;
                }
                let v = x[i][f];
                let st = &mut scan[s];
                if st.count >= cfg.min_samples_leaf
                    && count[s] - st.count >= cfg.min_samples_leaf
                    && v > st.last
                {
                    let (nl, nr) = (st.count as f64, (count[s] - st.count) as f64);
                    let sr = sum[s] - st.sum;
                    let gain = st.sum * st.sum / nl + sr * sr / nr - sum[s] * sum[s] / count[s] as f64;
                    if gain > 1e-12 && best[s].as_ref().is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Split {
                            feature: f,
                            threshold: 0.5 * (st.last + v),
                            gain,
                        });
                    }
                }
                st.count += 1;
                st.sum += residual[i];
                st.last = v;
            }
        }
        let mut next = Vec::new();
        for (s, &node) in frontier.iter().enumerate() {
            if let Some(split) = best[s].take() {
                let l = tree.leaf(0.0);
                let r = tree.leaf(0.0);
                tree.feature[node] = split.feature as i32;
                tree.threshold[node] = split.threshold;
                tree.left[node] = l as u32;
                tree.right[node] = r as u32;
                next.push(l);
                next.push(r);
            }
        }
        if next.is_empty() {
            break;
        }
        // Route rows of split nodes to their children and refresh leaf means.
        let mut acc = vec![(0usize, 0.0); tree.feature.len()];
        for i in 0..n {
            let node = node_of[i] as usize;
            if tree.feature[node] >= 0 {
                let f = tree.feature[node] as usize;
                node_of[i] = if x[i][f] < tree.threshold[node] {
                    tree.left[node]
                } else {
                    tree.right[node]
                };
                let c = &mut acc[node_of[i] as usize];
                c.0 += 1;
                c.1 += residual[i];
            }
        }
        for &leaf in &next {
            let (c, s) = acc[leaf];
            tree.value[leaf] = if c > 0 { s / c as f64 } else { 0.0 };
        }
        frontier = next;
    }
    tree
}

/// Fits a boosted regressor of `targets` on `x`. Predictions are clipped to
/// the range of the training targets intersected with `bounds`.
pub fn fit_boosted(
    x: &[Vec<f64>],
    targets: &[f64],
    bounds: Bounds,
    cfg: &BoostConfig,
) -> Result<BoostedTreeModel> {
    if x.is_empty() || x.len() != targets.len() {
        return Err(Error::Validation(format!(
            "boosting needs matching non-empty inputs, got {} rows and {} targets",
            x.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !bounds.contains_closed(**t)) {
        return Err(Error::Validation(format!(
            "target {t} lies outside [{}, {}]",
            bounds.lower, bounds.upper
        )));
    }
    if !(cfg.shrinkage > 0.0) || cfg.max_depth == 0 || cfg.min_samples_leaf == 0 {
        return Err(Error::Config("boosting needs shrinkage > 0, depth >= 1, min leaf >= 1".into()));
    }
    let n = x.len();
    let d = x[0].len();
    let init = targets.iter().sum::<f64>() / n as f64;
    let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut model = BoostedTreeModel {
        init,
        shrinkage: cfg.shrinkage,
        trees: Vec::with_capacity(cfg.trees),
        max_depth: cfg.max_depth,
        clip_lo: lo.max(bounds.lower),
        clip_hi: hi.min(bounds.upper),
    };
    if hi - lo <= 0.0 {
        return Ok(model);
    }
    let sorted: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]));
            o
        })
        .collect();
    let mut pred = vec![init; n];
    let mut residual = vec![0.0; n];
    let mut node_of = vec![0u32; n];
    for _ in 0..cfg.trees {
        for i in 0..n {
            residual[i] = targets[i] - pred[i];
        }
        let tree = fit_tree(x, &sorted, &residual, cfg, &mut node_of);
        // node_of already holds each row's leaf
        for i in 0..n {
            pred[i] += cfg.shrinkage * tree.value[node_of[i] as usize];
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Mean squared error of the first `n_trees` trees (unclipped).
pub fn staged_mse(model: &BoostedTreeModel, x: &[Vec<f64>], targets: &[f64], n_trees: usize) -> f64 {
    x.iter()
        .zip(targets)
        .map(|(x, t)| (model.predict_raw(x, n_trees) - t).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_split_recovers_step() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let t: Vec<f64> = (0..100).map(|i| if i < 40 { 1.3 } else { 1.5 }).collect();
        let cfg = BoostConfig {
            trees: 200,
            max_depth: 1,
            ..BoostConfig::default()
        };
        let m = fit_boosted(&x, &t, Bounds::default(), &cfg).unwrap();
        assert!((m.predict(&[10.0]) - 1.3).abs() < 1e-6);
        assert!((m.predict(&[90.0]) - 1.5).abs() < 1e-6);
        assert!((m.trees[0].threshold[0] - 39.5).abs() < 1e-12);
    }

    #[test]
    fn depth_is_respected() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let t: Vec<f64> = (0..64).map(|i| 1.2 + 0.4 * ((i * 31 % 17) as f64 / 17.0)).collect();
        let m = fit_boosted(&x, &t, Bounds::default(), &BoostConfig { trees: 5, ..Default::default() })
            .unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= 5));
    }
}
