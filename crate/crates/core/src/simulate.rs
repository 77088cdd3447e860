//! Confounded synthetic data with a known exposure-response function.
//!
//! Covariates `c1..c4 ~ N(0,1)`, `c5` uniform on `{-0.5, 0.5}`,
//! `c6 ~ U(-1, 1)`. The exposure is linear in the covariates plus noise and
//! the outcome depends on both, so the naive regression slope of outcome on
//! exposure is biased upwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, Dataset};
use crate::error::{Error, Result};

/// Exposure coefficients on `c1..c6`.
pub const EXPOSURE_COEFS: [f64; 6] = [0.8, 0.4, -0.6, 0.3, 0.5, 0.4];
/// Outcome coefficients on `c1..c6`.
pub const OUTCOME_COEFS: [f64; 6] = [0.3, 0.3, 0.2, -0.2, 0.2, -0.1];
const COVARIATE_VARIANCES: [f64; 6] = [1.0, 1.0, 1.0, 1.0, 0.25, 1.0 / 3.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErfShape {
    Linear,
    Curved,
}

impl std::str::FromStr for ErfShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ErfShape::Linear),
            "curved" => Ok(ErfShape::Curved),
            other => Err(Error::InvalidArgument(format!("unknown ERF shape `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub erf_shape: ErfShape,
    pub heteroskedastic: bool,
    pub seed: u64,
}

/// Closed-form facts about the generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub shape: ErfShape,
    pub heteroskedastic: bool,
    pub exposure_coefficients: [f64; 6],
    pub outcome_coefficients: [f64; 6],
    pub erf_intercept: f64,
    pub erf_slope: f64,
    pub erf_quadratic: f64,
    /// Population variance of the exposure (homoskedastic noise).
    pub exposure_variance: f64,
    /// Population OLS slope of outcome on exposure, linear shape,
    /// homoskedastic noise.
    pub naive_slope: f64,
}

/// `Var(E)` with unit-variance exposure noise.
pub fn exposure_variance() -> f64 {
    EXPOSURE_COEFS
        .iter()
        .zip(COVARIATE_VARIANCES)
        .map(|(a, v)| a * a * v)
        .sum::<f64>()
        + 1.0
}

/// Population slope of a naive regression of outcome on exposure (linear
/// shape, homoskedastic).
pub fn naive_slope() -> f64 {
    let cov: f64 = EXPOSURE_COEFS
        .iter()
        .zip(OUTCOME_COEFS)
        .zip(COVARIATE_VARIANCES)
        .map(|((a, g), v)| a * g * v)
        .sum();
    0.5 + cov / exposure_variance()
}

pub fn true_erf(shape: ErfShape, e: f64) -> f64 {
    match shape {
        ErfShape::Linear => 1.0 + 0.5 * e,
        ErfShape::Curved => 1.0 + 0.5 * e + 0.1 * e * e,
    }
}

fn truth(cfg: &SimConfig) -> Truth {
    Truth {
        shape: cfg.erf_shape,
        heteroskedastic: cfg.heteroskedastic,
        exposure_coefficients: EXPOSURE_COEFS,
        outcome_coefficients: OUTCOME_COEFS,
        erf_intercept: 1.0,
        erf_slope: 0.5,
        erf_quadratic: match cfg.erf_shape {
            ErfShape::Linear => 0.0,
            ErfShape::Curved => 0.1,
        },
        exposure_variance: exposure_variance(),
        naive_slope: naive_slope(),
    }
}

/// Draws a dataset with columns `c1..c6`, exposure and outcome.
///
/// A single ChaCha8 stream seeded with `cfg.seed` is consumed unit by unit
/// in the order c1, c2, c3, c4, c5, c6, exposure noise, outcome noise.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Dataset, Truth)> {
    if cfg.n < 10 {
        return Err(Error::InvalidArgument(format!("n must be >= 10, got {}", cfg.n)));
    }
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 6];
    let mut exposure = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = [0.0f64; 6];
        for v in c.iter_mut().take(4) {
            *v = rng.sample(StandardNormal);
        }
        c[4] = if rng.random::<f64>() < 0.5 { -0.5 } else { 0.5 };
        c[5] = rng.random_range(-1.0..1.0);
        let noise: f64 = rng.sample(StandardNormal);
        let noise_sd = if cfg.heteroskedastic {
            0.5 + 0.25 * c[0].abs()
        } else {
            1.0
        };
        let e: f64 = c.iter().zip(EXPOSURE_COEFS).map(|(x, a)| x * a).sum::<f64>() + noise_sd * noise;
        let eps: f64 = rng.sample(StandardNormal);
        let y = true_erf(cfg.erf_shape, e)
            + c.iter().zip(OUTCOME_COEFS).map(|(x, g)| x * g).sum::<f64>()
            + eps;
        for (col, v) in cols.iter_mut().zip(c) {
            col.push(v);
        }
        exposure.push(e);
        outcome.push(y);
    }
    let covariates = cols
        .into_iter()
        .enumerate()
        .map(|(k, v)| Covariate::numeric(format!("c{}", k + 1), v))
        .collect();
    let ds = Dataset::with_default_ids(exposure, covariates, Some(outcome))?;
    Ok((ds, truth(cfg)))
}
