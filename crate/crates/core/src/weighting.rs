//! Stabilized inverse-GPS weights, `min(f_E(e_i) / q(e_i, x_i), cap)`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gps::GpsEstimate;
use crate::pseudo_pop::{Approach, Provenance, PseudoPopulation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    /// Upper bound on any weight; `f64::INFINITY` disables capping.
    pub cap: f64,
}

impl WeightConfig {
    pub fn new(cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(Error::InvalidArgument(format!("weight cap must be > 0, got {cap}")));
        }
        Ok(WeightConfig { cap })
    }

    pub fn uncapped() -> Self {
        WeightConfig { cap: f64::INFINITY }
    }
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig { cap: 10.0 }
    }
}

pub fn stabilized_weights(gps_est: &GpsEstimate, cfg: &WeightConfig) -> Vec<f64> {
    gps_est
        .marginal
        .iter()
        .zip(&gps_est.gps)
        .map(|(f, q)| (f / q).min(cfg.cap))
        .collect()
}

/// Keeps every row of `ds` with its stabilized weight.
pub fn generate_weighted_pseudopop(
    ds: &Dataset,
    gps_est: &GpsEstimate,
    cfg: &WeightConfig,
) -> Result<PseudoPopulation> {
    if gps_est.len() != ds.len() {
        return Err(Error::InvalidArgument("GPS estimate is not aligned with the dataset".into()));
    }
    if gps_est.ids != ds.ids() {
        return Err(Error::InvalidArgument("GPS ids differ from dataset ids".into()));
    }
    let weights = stabilized_weights(gps_est, cfg);
    PseudoPopulation::new(
        ds.clone(),
        weights,
        Approach::Weighting,
        Provenance {
            weight_config: Some(*cfg),
            ..Default::default()
        },
    )
}
