//! Cross-validated stacking: base learners are combined with convex weights
//! that minimize out-of-fold squared error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FeatureMatrix, LearnerSpec, ModelKind, RegressionModel};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 500;
const TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub weights: Vec<f64>,
    pub models: Vec<RegressionModel>,
    /// Out-of-fold mean squared error of each base learner.
    pub cv_risks: Vec<f64>,
    /// Out-of-fold mean squared error of the weighted combination.
    pub ensemble_cv_risk: f64,
}

impl EnsembleModel {
    pub(crate) fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        self.weights
            .iter()
            .zip(&self.models)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, m)| w * m.predict_row(x, row))
            .sum()
    }
}

/// Convex weights `a` (a >= 0, sum a = 1) minimizing `|| y - sum_j a_j preds_j ||^2`.
///
/// Coordinate descent over pairs of coordinates: each step moves mass between
/// two weights by the exact minimizer along that feasible direction, clamped
/// to the simplex. Stops after 500 sweeps or when no weight moves by more
/// than 1e-10 in a sweep.
pub fn simplex_least_squares(preds: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = preds.len();
    if k == 1 {
        return vec![1.0];
    }
    let n = y.len() as f64;
    let mut h = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    for a in 0..k {
        b[a] = preds[a].iter().zip(y).map(|(p, t)| p * t).sum::<f64>() / n;
        for c in a..k {
            let v = preds[a].iter().zip(&preds[c]).map(|(p, q)| p * q).sum::<f64>() / n;
            h[a][c] = v;
            h[c][a] = v;
        }
    }
    let mut alpha = vec![1.0 / k as f64; k];
    for _ in 0..MAX_SWEEPS {
        let mut max_step: f64 = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                // Direction e_i - e_j; gradient g = H a - b.
                let gi: f64 = (0..k).map(|c| h[i][c] * alpha[c]).sum::<f64>() - b[i];
                let gj: f64 = (0..k).map(|c| h[j][c] * alpha[c]).sum::<f64>() - b[j];
                let curvature = h[i][i] + h[j][j] - 2.0 * h[i][j];
                let slope = gi - gj;
                let t = if curvature > 0.0 {
                    -slope / curvature
                } else if slope < 0.0 {
                    f64::INFINITY
                } else if slope > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                let (lo, hi) = (-alpha[i], alpha[j]);
                let t = t.clamp(lo, hi);
                if t != 0.0 {
                    // Clamped moves land exactly on the boundary.
                    if t == hi {
                        alpha[i] += alpha[j];
                        alpha[j] = 0.0;
                    } else if t == lo {
                        alpha[j] += alpha[i];
                        alpha[i] = 0.0;
                    } else {
                        alpha[i] += t;
                        alpha[j] -= t;
                    }
                    max_step = max_step.max(t.abs());
                }
            }
        }
        if max_step < TOLERANCE {
            break;
        }
    }
    for a in alpha.iter_mut() {
        if *a < 0.0 {
            *a = 0.0;
        }
    }
    let total: f64 = alpha.iter().sum();
    alpha.iter().map(|a| a / total).collect()
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Assigns each row to one of `k` folds using a seeded shuffle.
pub(crate) fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % k;
    }
    fold
}

/// Stacks `bases` with weights fit on `k_folds`-fold out-of-fold predictions,
/// then refits every base learner on all rows.
pub fn fit_ensemble(
    x: &FeatureMatrix,
    y: &[f64],
    bases: &[LearnerSpec],
    k_folds: usize,
    seed: u64,
) -> Result<RegressionModel> {
    let n = x.n_rows();
    if bases.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one base learner".into()));
    }
    if k_folds < 2 || n < k_folds {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= k_folds <= N, got k_folds={k_folds}, N={n}"
        )));
    }
    let folds = fold_assignment(n, k_folds, seed);
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..k_folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] == f);
            (train, test)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..bases.len())
        .flat_map(|b| (0..k_folds).map(move |f| (b, f)))
        .collect();
    let fold_preds: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(b, f)| {
            let (train, test) = &fold_rows[f];
            let xt = x.select_rows(train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let sub_seed = seed.wrapping_add(1 + (b * k_folds + f) as u64);
            let model = bases[b].fit(&xt, &yt, sub_seed)?;
            let xv = x.select_rows(test);
            model.predict(&xv)
        })
        .collect();

    let mut cv_preds = vec![vec![0.0; n]; bases.len()];
    for (&(b, f), preds) in jobs.iter().zip(fold_preds) {
        let preds = preds?;
        for (&row, p) in fold_rows[f].1.iter().zip(preds) {
            cv_preds[b][row] = p;
        }
    }
    let cv_risks: Vec<f64> = cv_preds.iter().map(|p| mse(p, y)).collect();
    let weights = simplex_least_squares(&cv_preds, y);
    let combined: Vec<f64> = (0..n)
        .map(|i| weights.iter().zip(&cv_preds).map(|(w, p)| w * p[i]).sum())
        .collect();
    let ensemble_cv_risk = mse(&combined, y);

    let models = bases
        .par_iter()
        .enumerate()
        .map(|(b, spec)| spec.fit(x, y, seed.wrapping_add(1 + (bases.len() * k_folds + b) as u64)))
        .collect::<Result<Vec<_>>>()?;

    Ok(RegressionModel::new(
        x.names().to_vec(),
        ModelKind::Ensemble(EnsembleModel {
            weights,
            models,
            cv_risks,
            ensemble_cv_risk,
        }),
    ))
}
