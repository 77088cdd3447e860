//! Gradient-boosted regression trees with squared-error loss and exact
//! greedy splits.

use super::{FeatureMatrix, HyperParams, ModelKind, RegressionModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x.get(row, feature) <= threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbtModel {
    pub base: f64,
    pub eta: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub(crate) fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        self.trees
            .iter()
            .fold(self.base, |acc, t| acc + self.eta * t.predict_row(x, row))
    }

    /// Predictions after only the first `rounds` trees.
    pub fn predict_partial(&self, x: &FeatureMatrix, rounds: usize) -> Vec<f64> {
        (0..x.n_rows())
            .map(|i| {
                self.trees[..rounds.min(self.trees.len())]
                    .iter()
                    .fold(self.base, |acc, t| acc + self.eta * t.predict_row(x, i))
            })
            .collect()
    }
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    residual: &'a [f64],
    max_depth: usize,
    min_child_weight: f64,
    min_gain: f64,
    nodes: Vec<Node>,
    in_left: Vec<bool>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    /// `sorted[j]` holds the node's rows ordered by feature `j`.
    fn build(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        let count = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let leaf_value = sum / count as f64;
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(leaf_value));

        // Hessian of squared error is 1 per row, so its sum is the count.
        if depth >= self.max_depth || (count as f64) < self.min_child_weight || count < 2 {
            return slot;
        }
        let Some(best) = self.best_split(&sorted, sum) else {
            return slot;
        };

        for &i in rows {
            self.in_left[i] = self.x.get(i, best.feature) <= best.threshold;
        }
        let mut left_sorted = Vec::with_capacity(sorted.len());
        let mut right_sorted = Vec::with_capacity(sorted.len());
        for list in &sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.iter().partition(|&&i| self.in_left[i]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        drop(sorted);
        let left = self.build(left_sorted, depth + 1);
        let right = self.build(right_sorted, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        slot
    }

    fn best_split(&self, sorted: &[Vec<usize>], sum: f64) -> Option<BestSplit> {
        let n = sorted[0].len() as f64;
        let parent = sum * sum / n;
        let mut best: Option<BestSplit> = None;
        for (feature, list) in sorted.iter().enumerate() {
            let col = self.x.column(feature);
            let mut left_sum = 0.0;
            for k in 0..list.len() - 1 {
                left_sum += self.residual[list[k]];
                let (v, v_next) = (col[list[k]], col[list[k + 1]]);
                if v >= v_next {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let right_sum = sum - left_sum;
                let gain = left_sum * left_sum / nl + right_sum * right_sum / nr - parent;
                if gain > self.min_gain && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = 0.5 * (v + v_next);
                    let threshold = if mid < v_next { mid } else { v };
                    best = Some(BestSplit {
                        gain,
                        feature,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

/// Fits `mean(y) + sum_t eta * tree_t(x)`; each tree is grown greedily on the
/// current residuals to depth `max_depth`. Nodes holding fewer than
/// `min_child_weight` rows stay leaves.
pub fn fit_gbt(x: &FeatureMatrix, y: &[f64], hp: &HyperParams) -> Result<RegressionModel> {
    hp.validate()?;
    let n = x.n_rows();
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{} targets for {n} rows", y.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("boosting needs at least 2 rows".into()));
    }
    let base = y.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![base; n];

    let presorted: Vec<Vec<usize>> = if x.n_cols() == 0 {
        vec![(0..n).collect()]
    } else {
        (0..x.n_cols())
            .map(|j| {
                let col = x.column(j);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                idx
            })
            .collect()
    };
    let max_depth = if x.n_cols() == 0 { 0 } else { hp.max_depth };

    let mut trees = Vec::with_capacity(hp.nrounds);
    let mut residual = vec![0.0; n];
    for _ in 0..hp.nrounds {
        for i in 0..n {
            residual[i] = y[i] - fitted[i];
        }
        let sse: f64 = residual.iter().map(|r| r * r).sum();
        let mut builder = TreeBuilder {
            x,
            residual: &residual,
            max_depth,
            min_child_weight: hp.min_child_weight,
            min_gain: 1e-14 * sse,
            nodes: Vec::new(),
            in_left: vec![false; n],
        };
        builder.build(presorted.clone(), 0);
        let tree = Tree {
            nodes: builder.nodes,
        };
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += hp.eta * tree.predict_row(x, i);
        }
        trees.push(tree);
    }
    Ok(RegressionModel::new(
        x.names().to_vec(),
        ModelKind::Gbt(GbtModel {
            base,
            eta: hp.eta,
            trees,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(nrounds: usize, eta: f64, max_depth: usize) -> HyperParams {
        HyperParams {
            nrounds,
            eta,
            max_depth,
            min_child_weight: 1.0,
        }
    }

    fn gbt(m: &RegressionModel) -> &GbtModel {
        match m.kind() {
            ModelKind::Gbt(g) => g,
            _ => unreachable!(),
        }
    }

    #[test]
    fn depth_zero_predicts_mean() {
        let x = FeatureMatrix::from_column(vec![1.0, 2.0, 3.0, 4.0]);
        let y = [1.0, 5.0, 2.0, 8.0];
        let m = fit_gbt(&x, &y, &hp(1, 0.5, 0)).unwrap();
        for p in m.predict(&x).unwrap() {
            assert!((p - 4.0).abs() < 1e-12);
        }
    }

    /// Exhaustive search over every split point of a single feature.
    fn brute_force_best_split(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        let mut xs: Vec<f64> = x.to_vec();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for w in xs.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<_>, Vec<_>) = x.iter().zip(y).partition(|(xi, _)| **xi <= t);
            let ml = l.iter().map(|p| *p.1).sum::<f64>() / l.len() as f64;
            let mr = r.iter().map(|p| *p.1).sum::<f64>() / r.len() as f64;
            let sse: f64 = l.iter().map(|p| (p.1 - ml).powi(2)).sum::<f64>()
                + r.iter().map(|p| (p.1 - mr).powi(2)).sum::<f64>();
            if sse < best.0 {
                best = (sse, t, ml, mr);
            }
        }
        (best.1, best.2, best.3)
    }

    #[test]
    fn single_stump_fits_group_means() {
        let x = vec![0.3, 1.1, 2.0, 2.5, 3.7, 4.1, 5.0, 6.2];
        let y = vec![1.0, 1.2, 0.8, 1.1, 4.0, 4.3, 3.9, 4.1];
        let (t, ml, mr) = brute_force_best_split(&x, &y);
        assert!((t - 3.1).abs() < 1e-12);
        let fm = FeatureMatrix::from_column(x.clone());
        let m = fit_gbt(&fm, &y, &hp(1, 1.0, 1)).unwrap();
        let pred = m.predict(&fm).unwrap();
        for (xi, p) in x.iter().zip(&pred) {
            let want = if *xi <= t { ml } else { mr };
            assert!((p - want).abs() < 1e-12, "x={xi}: {p} vs {want}");
        }
        assert_eq!(gbt(&m).trees[0].n_leaves(), 2);
    }

    #[test]
    fn training_mse_nonincreasing() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| x.powi(2) + (x * 3.0).sin()).collect();
        let fm = FeatureMatrix::from_column(xs);
        let m = fit_gbt(&fm, &y, &hp(30, 0.3, 3)).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=30 {
            let p = gbt(&m).predict_partial(&fm, t);
            let mse: f64 = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 60.0;
            assert!(mse <= prev + 1e-12, "round {t}: {mse} > {prev}");
            prev = mse;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn min_child_weight_blocks_splits() {
        let x = FeatureMatrix::from_column(vec![0.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let m = fit_gbt(
            &x,
            &y,
            &HyperParams {
                nrounds: 1,
                eta: 1.0,
                max_depth: 3,
                min_child_weight: 5.0,
            },
        )
        .unwrap();
        assert_eq!(gbt(&m).trees[0].n_leaves(), 1);
    }

    #[test]
    fn identical_inputs_identical_models() {
        let x = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            vec![
                (0..40).map(|i| (i as f64).sin()).collect(),
                (0..40).map(|i| (i as f64 * 0.3).cos()).collect(),
            ],
            40,
        )
        .unwrap();
        let y: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let a = fit_gbt(&x, &y, &hp(10, 0.3, 4)).unwrap();
        let b = fit_gbt(&x, &y, &hp(10, 0.3, 4)).unwrap();
        assert_eq!(a, b);
    }
}
