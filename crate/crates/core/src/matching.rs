//! Caliper nearest-neighbour matching on standardized (exposure, GPS).
//!
//! For every exposure level `w` of the bin grid, each unit `j` (recipient)
//! is matched to the donor `i` with `|e_i - w| <= delta/2` minimizing
//!
//! ```text
//! scale * |p~(w, x_j) - p~_i| + (1 - scale) * |w~ - e~_i|
//! ```
//!
//! where `~` denotes min-max standardization over the observed exposures and
//! GPS values. A unit's counter weight is the number of times it was picked
//! as a donor over all recipients and levels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ObservationId};
use crate::error::{Error, Result};
use crate::gps::{ConditionalStats, GpsEstimate, GpsModel};
use crate::pseudo_pop::{Approach, Provenance, PseudoPopulation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistMeasure {
    /// Manhattan distance.
    #[default]
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Caliper width in exposure units.
    pub delta_n: f64,
    /// Weight of the GPS coordinate; `1 - scale` goes to the exposure.
    pub scale: f64,
    pub dist_measure: DistMeasure,
    /// Exposure levels to match at; defaults to [`default_bin_seq`].
    pub bin_seq: Option<Vec<f64>>,
}

impl MatchConfig {
    pub fn new(delta_n: f64, scale: f64) -> Result<Self> {
        let cfg = MatchConfig {
            delta_n,
            scale,
            dist_measure: DistMeasure::L1,
            bin_seq: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_n > 0.0 && self.delta_n.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta_n must be > 0, got {}", self.delta_n)));
        }
        if !(0.0..=1.0).contains(&self.scale) {
            return Err(Error::InvalidArgument(format!("scale must be in [0, 1], got {}", self.scale)));
        }
        if let Some(bins) = &self.bin_seq {
            if bins.is_empty() || bins.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidArgument("bin_seq must be nonempty and finite".into()));
            }
        }
        Ok(())
    }
}

/// `{e_min + delta/2, e_min + 3 delta/2, ...}` up to and including `e_max`.
pub fn default_bin_seq(e_min: f64, e_max: f64, delta_n: f64) -> Result<Vec<f64>> {
    if !(e_min < e_max) || !(delta_n > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need e_min < e_max and delta_n > 0, got ({e_min}, {e_max}, {delta_n})"
        )));
    }
    let start = e_min + delta_n / 2.0;
    if start > e_max {
        return Err(Error::EmptyGrid { start, end: e_max });
    }
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let v = start + k as f64 * delta_n;
        if v > e_max {
            break;
        }
        grid.push(v);
        k += 1;
    }
    Ok(grid)
}

/// Min-max ranges of observed exposure and observed GPS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub exposure_min: f64,
    pub exposure_max: f64,
    pub gps_min: f64,
    pub gps_max: f64,
}

impl Standardizer {
    pub fn from_observed(exposure: &[f64], gps: &[f64]) -> Result<Self> {
        let range = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        };
        let (exposure_min, exposure_max) = range(exposure);
        let (gps_min, gps_max) = range(gps);
        if !(exposure_max > exposure_min) {
            return Err(Error::DegenerateStandardizer("exposure range is zero".into()));
        }
        if !(gps_max > gps_min) {
            return Err(Error::DegenerateStandardizer("GPS range is zero".into()));
        }
        Ok(Standardizer {
            exposure_min,
            exposure_max,
            gps_min,
            gps_max,
        })
    }

    #[inline]
    pub fn exposure(&self, e: f64) -> f64 {
        ((e - self.exposure_min) / (self.exposure_max - self.exposure_min)).clamp(0.0, 1.0)
    }

    #[inline]
    pub fn gps(&self, g: f64) -> f64 {
        ((g - self.gps_min) / (self.gps_max - self.gps_min)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Donor {
    gps: f64,
    /// `(1 - scale) * |w~ - e~_i|`, fixed for the level.
    exposure_term: f64,
    id: ObservationId,
    row: usize,
}

#[inline]
fn distance(scale: f64, recipient_gps: f64, d: &Donor) -> f64 {
    scale * (recipient_gps - d.gps).abs() + d.exposure_term
}

/// Exact linear scan; ties go to the smallest id.
fn nearest_by_scan(scale: f64, target: f64, donors: &[Donor]) -> usize {
    let mut best = 0;
    let mut best_d = distance(scale, target, &donors[0]);
    for (k, d) in donors.iter().enumerate().skip(1) {
        let dist = distance(scale, target, d);
        if dist < best_d || (dist == best_d && d.id < donors[best].id) {
            best = k;
            best_d = dist;
        }
    }
    donors[best].row
}

/// Nearest donor when the exposure term vanishes; `sorted` is ordered by
/// `(gps, id)`. Equal-distance runs are contiguous on either side of the
/// target, so walking them reproduces the scan's tie-break.
fn nearest_sorted(target: f64, sorted: &[Donor]) -> usize {
    let k = sorted.partition_point(|d| d.gps < target);
    let dist = |d: &Donor| distance(1.0, target, d);
    let mut best_d = f64::INFINITY;
    if k < sorted.len() {
        best_d = dist(&sorted[k]);
    }
    if k > 0 {
        best_d = best_d.min(dist(&sorted[k - 1]));
    }
    let mut best: Option<&Donor> = None;
    let mut i = k;
    while i < sorted.len() && dist(&sorted[i]) == best_d {
        if best.is_none_or(|b| sorted[i].id < b.id) {
            best = Some(&sorted[i]);
        }
        i += 1;
    }
    let mut i = k;
    while i > 0 && dist(&sorted[i - 1]) == best_d {
        if best.is_none_or(|b| sorted[i - 1].id < b.id) {
            best = Some(&sorted[i - 1]);
        }
        i -= 1;
    }
    best.expect("nonempty donor set").row
}

/// Donor counts at one level, or `None` when the caliper is empty.
fn match_level(
    w: f64,
    ds: &Dataset,
    gps: &[f64],
    model: &GpsModel,
    stats: &ConditionalStats,
    cfg: &MatchConfig,
    std: &Standardizer,
) -> Option<Vec<u64>> {
    let half = cfg.delta_n / 2.0;
    let w_std = std.exposure(w);
    let exposure_weight = 1.0 - cfg.scale;
    let mut donors: Vec<Donor> = ds
        .exposure()
        .iter()
        .enumerate()
        .filter(|(_, &e)| (e - w).abs() <= half)
        .map(|(i, &e)| Donor {
            gps: std.gps(gps[i]),
            exposure_term: exposure_weight * (w_std - std.exposure(e)).abs(),
            id: ds.ids()[i],
            row: i,
        })
        .collect();
    if donors.is_empty() {
        return None;
    }
    let counterfactual = model.densities_at(w, stats);
    let fast = cfg.scale == 1.0;
    if fast {
        donors.sort_by(|a, b| a.gps.total_cmp(&b.gps).then(a.id.cmp(&b.id)));
    }
    let picks: Vec<usize> = counterfactual
        .par_iter()
        .map(|&p| {
            let target = std.gps(p);
            if fast {
                nearest_sorted(target, &donors)
            } else {
                nearest_by_scan(cfg.scale, target, &donors)
            }
        })
        .collect();
    let mut counts = vec![0u64; ds.len()];
    for row in picks {
        counts[row] += 1;
    }
    Some(counts)
}

fn require_model<'a>(gps_est: &'a GpsEstimate, ds: &Dataset) -> Result<&'a GpsModel> {
    if gps_est.len() != ds.len() || gps_est.ids != ds.ids() {
        return Err(Error::InvalidArgument("GPS estimate is not aligned with the dataset".into()));
    }
    gps_est
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("matching requires a fitted GPS model".into()))
}

/// Donor-selection counts at exposure level `w_star`. An empty caliper
/// yields all zeros.
pub fn match_at_level(
    w_star: f64,
    ds: &Dataset,
    gps_est: &GpsEstimate,
    cfg: &MatchConfig,
    standardizer: &Standardizer,
) -> Result<Vec<u64>> {
    cfg.validate()?;
    let model = require_model(gps_est, ds)?;
    let stats = model.conditional_stats(ds)?;
    Ok(
        match_level(w_star, ds, &gps_est.gps, model, &stats, cfg, standardizer).unwrap_or_else(|| {
            log::warn!("no donors within caliper of exposure level {w_star}; level skipped");
            vec![0; ds.len()]
        }),
    )
}

/// Sums donor counts over every level of the bin grid.
pub fn generate_matched_pseudopop(
    ds: &Dataset,
    gps_est: &GpsEstimate,
    cfg: &MatchConfig,
    nthread: usize,
) -> Result<PseudoPopulation> {
    crate::with_threads(nthread, || matched_pseudopop(ds, gps_est, cfg))
}

pub(crate) fn matched_pseudopop(ds: &Dataset, gps_est: &GpsEstimate, cfg: &MatchConfig) -> Result<PseudoPopulation> {
    cfg.validate()?;
    let model = require_model(gps_est, ds)?;
    let standardizer = Standardizer::from_observed(ds.exposure(), &gps_est.gps)?;
    let bins = match &cfg.bin_seq {
        Some(b) => b.clone(),
        None => default_bin_seq(standardizer.exposure_min, standardizer.exposure_max, cfg.delta_n)?,
    };
    let stats = model.conditional_stats(ds)?;
    let per_bin: Vec<Option<Vec<u64>>> = bins
        .par_iter()
        .map(|&w| match_level(w, ds, &gps_est.gps, model, &stats, cfg, &standardizer))
        .collect();

    let mut totals = vec![0u64; ds.len()];
    let mut skipped = Vec::new();
    let mut matched = 0;
    for (&w, counts) in bins.iter().zip(per_bin) {
        match counts {
            Some(c) => {
                matched += 1;
                for (t, v) in totals.iter_mut().zip(c) {
                    *t += v;
                }
            }
            None => {
                log::warn!("no donors within caliper of exposure level {w}; level skipped");
                skipped.push(w);
            }
        }
    }
    log::debug!(
        "matching: {} levels, {} skipped, {} donors used",
        bins.len(),
        skipped.len(),
        totals.iter().filter(|&&c| c > 0).count()
    );
    let provenance = Provenance {
        match_config: Some(cfg.clone()),
        skipped_bins: skipped,
        matched_bins: matched,
        ..Default::default()
    };
    PseudoPopulation::new(
        ds.clone(),
        totals.into_iter().map(|c| c as f64).collect(),
        Approach::Matching,
        provenance,
    )
}
