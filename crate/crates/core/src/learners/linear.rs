use nalgebra::{DMatrix, DVector};

use super::{FeatureMatrix, ModelKind, RegressionModel};
use crate::error::{Error, Result};

const RIDGE_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    #[inline]
    pub(crate) fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .fold(self.intercept, |acc, (j, b)| acc + b * x.get(row, j))
    }
}

/// Solves `(A + jitter I) b = r` for symmetric positive semi-definite `A`.
pub(crate) fn solve_spd(mut a: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    for i in 0..a.nrows() {
        a[(i, i)] += RIDGE_JITTER;
    }
    let chol = a.cholesky().ok_or(Error::SingularDesign)?;
    let sol = chol.solve(&rhs);
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::SingularDesign)
    }
}

/// Weighted least squares with an intercept.
///
/// Features and target are centered at their weighted means before the
/// normal equations are formed; the intercept is recovered afterwards.
pub fn fit_linear(
    x: &FeatureMatrix,
    y: &[f64],
    sample_weights: Option<&[f64]>,
) -> Result<RegressionModel> {
    let n = x.n_rows();
    let p = x.n_cols();
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{} targets for {n} rows", y.len())));
    }
    if n < p + 1 {
        return Err(Error::SingularDesign);
    }
    let w: Vec<f64> = match sample_weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }

    let y_mean = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum::<f64>() / wsum;
    let x_means: Vec<f64> = (0..p)
        .map(|j| {
            w.iter()
                .zip(x.column(j))
                .map(|(wi, xi)| wi * xi)
                .sum::<f64>()
                / wsum
        })
        .collect();

    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let yc = y[i] - y_mean;
        for a in 0..p {
            let xa = w[i] * (x.get(i, a) - x_means[a]);
            xty[a] += xa * yc;
            for b in a..p {
                xtx[(a, b)] += xa * (x.get(i, b) - x_means[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let beta = if p == 0 {
        DVector::zeros(0)
    } else {
        solve_spd(xtx, xty)?
    };
    let intercept = y_mean - beta.iter().zip(&x_means).map(|(b, m)| b * m).sum::<f64>();
    Ok(RegressionModel::new(
        x.names().to_vec(),
        ModelKind::Linear(LinearModel {
            intercept,
            coefficients: beta.iter().copied().collect(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coefs(m: &RegressionModel) -> (f64, Vec<f64>) {
        match m.kind() {
            ModelKind::Linear(l) => (l.intercept, l.coefficients.clone()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn recovers_exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let m = fit_linear(&FeatureMatrix::from_column(xs), &y, None).unwrap();
        let (b0, b) = coefs(&m);
        assert!((b0 - 3.0).abs() < 1e-8);
        assert!((b[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_target() {
        let x = FeatureMatrix::from_column(vec![1.0, 5.0, -2.0, 0.5]);
        let m = fit_linear(&x, &[4.2; 4], None).unwrap();
        let (b0, b) = coefs(&m);
        assert!((b0 - 4.2).abs() < 1e-12);
        assert!(b[0].abs() < 1e-12);
    }

    #[test]
    fn weighted_fixture_matches_exact_solution() {
        // Weighted normal equations solved in 40-digit arithmetic:
        // intercept = -2/11, slope = 17/11.
        let x = FeatureMatrix::from_column(vec![0.0, 1.0, 2.0]);
        let m = fit_linear(&x, &[0.0, 1.0, 3.0], Some(&[1.0, 1.0, 2.0])).unwrap();
        let (b0, b) = coefs(&m);
        assert!((b0 - (-0.181_818_181_818_181_82)).abs() < 1e-9);
        assert!((b[0] - 1.545_454_545_454_545_5).abs() < 1e-9);
    }

    #[test]
    fn too_few_rows_is_singular() {
        let x = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![3.0, 1.0]],
            2,
        )
        .unwrap();
        assert!(matches!(fit_linear(&x, &[1.0, 2.0], None), Err(Error::SingularDesign)));
    }

    proptest! {
        #[test]
        fn exact_linear_data_any_positive_weights(
            b0 in -5.0f64..5.0,
            b1 in -5.0f64..5.0,
            b2 in -5.0f64..5.0,
            w in prop::collection::vec(0.1f64..10.0, 12),
        ) {
            let x1: Vec<f64> = (0..12).map(|i| i as f64 / 3.0).collect();
            let x2: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            let y: Vec<f64> = (0..12).map(|i| b0 + b1 * x1[i] + b2 * x2[i]).collect();
            let x = FeatureMatrix::new(vec!["a".into(), "b".into()], vec![x1, x2], 12).unwrap();
            let m = fit_linear(&x, &y, Some(&w)).unwrap();
            let (c0, c) = coefs(&m);
            prop_assert!((c0 - b0).abs() < 1e-8);
            prop_assert!((c[0] - b1).abs() < 1e-8);
            prop_assert!((c[1] - b2).abs() < 1e-8);
        }
    }
}
