//! Generalized propensity score: the conditional density of the exposure
//! given covariates, estimated under a normal or a kernel specification.
//!
//! Both specifications model the conditional mean with a regression learner.
//! The normal one assumes normal residuals with a single scale; the kernel
//! one also models the conditional variance and smooths the standardized
//! residuals with a Gaussian kernel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantile_sorted, ColumnData, CovariateKind, Dataset, ObservationId};
use crate::error::{Error, Result};
use crate::learners::{FeatureMatrix, LearnerSpec, RegressionModel};
use crate::stats::{mean, normal_pdf, population_variance, sample_sd};
use crate::tuner::Transformer;

/// Lower bound applied to every density value.
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Lower bound applied to conditional variance predictions.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Normal,
    Kernel,
}

impl std::str::FromStr for DensityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DensityKind::Normal),
            "kernel" => Ok(DensityKind::Kernel),
            other => Err(Error::InvalidArgument(format!("unknown density kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum FeatureSource {
    Numeric { transforms: Vec<Transformer> },
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
struct FeatureColumn {
    covariate: String,
    source: FeatureSource,
}

/// How covariates map onto learner features: numeric columns pass through
/// their transform chain, categorical columns are one-hot encoded with the
/// first level dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    columns: Vec<FeatureColumn>,
}

impl FeatureSpec {
    pub fn from_dataset(ds: &Dataset) -> Self {
        FeatureSpec {
            columns: ds
                .covariates()
                .iter()
                .map(|c| FeatureColumn {
                    covariate: c.name.clone(),
                    source: match &c.data {
                        ColumnData::Numeric(_) => FeatureSource::Numeric {
                            transforms: Vec::new(),
                        },
                        ColumnData::Categorical { levels, .. } => FeatureSource::Categorical {
                            levels: levels.clone(),
                        },
                    },
                })
                .collect(),
        }
    }

    /// Appends `t` to the transform chain of numeric covariate `name`.
    pub fn push_transform(&mut self, name: &str, t: Transformer) -> Result<()> {
        let col = self
            .columns
            .iter_mut()
            .find(|c| c.covariate == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        match &mut col.source {
            FeatureSource::Numeric { transforms } => {
                transforms.push(t);
                Ok(())
            }
            FeatureSource::Categorical { .. } => Err(Error::NonNumericColumn(name.to_string())),
        }
    }

    /// `(covariate, transform names)` for every transformed covariate.
    pub fn transform_ledger(&self) -> Vec<(String, Vec<String>)> {
        self.columns
            .iter()
            .filter_map(|c| match &c.source {
                FeatureSource::Numeric { transforms } if !transforms.is_empty() => Some((
                    c.covariate.clone(),
                    transforms.iter().map(|t| t.name().to_string()).collect(),
                )),
                _ => None,
            })
            .collect()
    }

    pub fn build(&self, ds: &Dataset) -> Result<FeatureMatrix> {
        let n = ds.len();
        let mut names = Vec::new();
        let mut cols = Vec::new();
        for fc in &self.columns {
            let cov = ds
                .covariate(&fc.covariate)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing covariate `{}`", fc.covariate)))?;
            match (&fc.source, &cov.data) {
                (FeatureSource::Numeric { transforms }, ColumnData::Numeric(v)) => {
                    let mut values = v.clone();
                    let mut name = fc.covariate.clone();
                    for t in transforms {
                        values = t.apply(&values);
                        name = format!("{}({name})", t.name());
                    }
                    names.push(name);
                    cols.push(values);
                }
                (FeatureSource::Categorical { levels }, ColumnData::Categorical { levels: l2, codes }) => {
                    if levels != l2 {
                        return Err(Error::SchemaMismatch(format!(
                            "levels of `{}` differ from training data",
                            fc.covariate
                        )));
                    }
                    for (k, level) in levels.iter().enumerate().skip(1) {
                        names.push(format!("{}={level}", fc.covariate));
                        cols.push(codes.iter().map(|&c| if c == k { 1.0 } else { 0.0 }).collect());
                    }
                }
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "covariate `{}` changed kind",
                        fc.covariate
                    )))
                }
            }
        }
        FeatureMatrix::new(names, cols, n)
    }

    pub fn covariate_kinds(&self) -> Vec<(String, CovariateKind)> {
        self.columns
            .iter()
            .map(|c| {
                let kind = match c.source {
                    FeatureSource::Numeric { .. } => CovariateKind::Numeric,
                    FeatureSource::Categorical { .. } => CovariateKind::Categorical,
                };
                (c.covariate.clone(), kind)
            })
            .collect()
    }
}

/// Gaussian kernel density estimate `(1/(n h)) sum_i phi((t - s_i)/h)` at each
/// evaluation point.
pub fn kernel_density(samples: &[f64], bandwidth: f64, eval_points: &[f64]) -> Vec<f64> {
    eval_points
        .par_iter()
        .map(|&t| kde_at(samples, bandwidth, t))
        .collect()
}

#[inline]
fn kde_at(samples: &[f64], bandwidth: f64, t: f64) -> f64 {
    let s: f64 = samples.iter().map(|&si| normal_pdf((t - si) / bandwidth)).sum();
    s / (samples.len() as f64 * bandwidth)
}

/// Silverman's rule of thumb `0.9 min(sd, IQR/1.34) n^(-1/5)`, using the
/// sample standard deviation; falls back to `sd` alone when the IQR is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!("{n} samples")));
    }
    let sd = sample_sd(samples);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateSample("zero variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Fitted marginal density of the exposure.
#[derive(Clone, Debug, PartialEq)]
pub enum MarginalDensity {
    Normal { mean: f64, sd: f64 },
    Kernel { samples: Vec<f64>, bandwidth: f64 },
}

impl MarginalDensity {
    pub fn fit(exposure: &[f64], kind: DensityKind) -> Result<Self> {
        if exposure.len() < 2 {
            return Err(Error::DegenerateExposure(format!("{} rows", exposure.len())));
        }
        let var = population_variance(exposure);
        if !(var > 0.0) {
            return Err(Error::DegenerateExposure("zero variance".into()));
        }
        Ok(match kind {
            DensityKind::Normal => MarginalDensity::Normal {
                mean: mean(exposure),
                sd: var.sqrt(),
            },
            DensityKind::Kernel => MarginalDensity::Kernel {
                samples: exposure.to_vec(),
                bandwidth: silverman_bandwidth(exposure)
                    .map_err(|e| Error::DegenerateExposure(e.to_string()))?,
            },
        })
    }

    pub fn evaluate(&self, points: &[f64]) -> Vec<f64> {
        let raw = match self {
            MarginalDensity::Normal { mean, sd } => {
                points.iter().map(|e| normal_pdf((e - mean) / sd) / sd).collect()
            }
            MarginalDensity::Kernel { samples, bandwidth } => kernel_density(samples, *bandwidth, points),
        };
        raw.into_iter().map(|d: f64| d.max(DENSITY_FLOOR)).collect()
    }
}

/// Marginal exposure density evaluated at the exposures themselves.
pub fn marginal_density(exposure: &[f64], kind: DensityKind) -> Result<Vec<f64>> {
    Ok(MarginalDensity::fit(exposure, kind)?.evaluate(exposure))
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalDensity {
    /// Normal residuals with maximum-likelihood scale.
    Normal { sd: f64 },
    /// Kernel smoother over residuals standardized by the fitted variance.
    Kernel {
        variance_model: RegressionModel,
        standardized_residuals: Vec<f64>,
        bandwidth: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpsModel {
    pub kind: DensityKind,
    pub features: FeatureSpec,
    pub mean_model: RegressionModel,
    pub conditional: ConditionalDensity,
    pub marginal: MarginalDensity,
}

/// Per-row conditional mean and standard deviation of the exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GpsModel {
    /// Conditional density of exposure level `w` for a row with the given
    /// conditional mean and standard deviation.
    #[inline]
    pub fn density(&self, w: f64, mean: f64, sd: f64) -> f64 {
        let d = match &self.conditional {
            ConditionalDensity::Normal { .. } => normal_pdf((w - mean) / sd) / sd,
            ConditionalDensity::Kernel {
                standardized_residuals,
                bandwidth,
                ..
            } => kde_at(standardized_residuals, *bandwidth, (w - mean) / sd) / sd,
        };
        d.max(DENSITY_FLOOR)
    }

    pub fn conditional_stats(&self, ds: &Dataset) -> Result<ConditionalStats> {
        let x = self.features.build(ds)?;
        let mean = self.mean_model.predict(&x)?;
        let sd = match &self.conditional {
            ConditionalDensity::Normal { sd } => vec![*sd; ds.len()],
            ConditionalDensity::Kernel { variance_model, .. } => variance_model
                .predict(&x)?
                .into_iter()
                .map(|v| v.max(VARIANCE_FLOOR).sqrt())
                .collect(),
        };
        Ok(ConditionalStats { mean, sd })
    }

    /// Densities at level `w` for every row of precomputed stats.
    pub fn densities_at(&self, w: f64, stats: &ConditionalStats) -> Vec<f64> {
        stats
            .mean
            .par_iter()
            .zip(stats.sd.par_iter())
            .map(|(&m, &s)| self.density(w, m, s))
            .collect()
    }
}

/// `(E[E|x_j], sqrt(V[E|x_j]))` for every row.
pub fn predict_conditional_stats(model: &GpsModel, ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = model.conditional_stats(ds)?;
    Ok((s.mean, s.sd))
}

/// Counterfactual GPS `q(w_star, x_j)` for every row of `ds`.
pub fn evaluate_gps_at(model: &GpsModel, w_star: f64, ds: &Dataset) -> Result<Vec<f64>> {
    let stats = model.conditional_stats(ds)?;
    Ok(model.densities_at(w_star, &stats))
}

/// GPS values and marginal densities at the observed exposures.
#[derive(Clone, Debug, PartialEq)]
pub struct GpsEstimate {
    pub ids: Vec<ObservationId>,
    pub gps: Vec<f64>,
    pub marginal: Vec<f64>,
    pub model: Option<GpsModel>,
}

impl GpsEstimate {
    pub fn len(&self) -> usize {
        self.gps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gps.is_empty()
    }

    pub fn select_rows(&self, rows: &[usize]) -> GpsEstimate {
        GpsEstimate {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            gps: rows.iter().map(|&i| self.gps[i]).collect(),
            marginal: rows.iter().map(|&i| self.marginal[i]).collect(),
            model: self.model.clone(),
        }
    }

    /// Columns `id, gps, marginal_density`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "gps", "marginal_density"])?;
        for i in 0..self.len() {
            w.write_record([
                self.ids[i].to_string(),
                self.gps[i].to_string(),
                self.marginal[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads values written by [`GpsEstimate::write_csv`]; no model attached.
    pub fn read_csv(path: &Path) -> Result<GpsEstimate> {
        #[derive(Deserialize)]
        struct Row {
            id: u64,
            gps: f64,
            marginal_density: f64,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut est = GpsEstimate {
            ids: Vec::new(),
            gps: Vec::new(),
            marginal: Vec::new(),
            model: None,
        };
        for (r, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            if !(row.gps > 0.0 && row.marginal_density > 0.0) {
                return Err(Error::Parse {
                    row: r + 1,
                    column: "gps".into(),
                    message: "densities must be positive".into(),
                });
            }
            est.ids.push(ObservationId(row.id));
            est.gps.push(row.gps);
            est.marginal.push(row.marginal_density);
        }
        Ok(est)
    }
}

/// Estimates the GPS with covariates encoded by `features`.
pub fn estimate_gps_with_features(
    ds: &Dataset,
    features: &FeatureSpec,
    kind: DensityKind,
    learner: &LearnerSpec,
    rng_seed: u64,
) -> Result<GpsEstimate> {
    if ds.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "GPS estimation needs at least 10 rows, got {}",
            ds.len()
        )));
    }
    let e = ds.exposure();
    if !(population_variance(e) > 0.0) {
        return Err(Error::DegenerateExposure("zero variance".into()));
    }
    let x = features.build(ds)?;
    let mean_model = learner.fit(&x, e, rng_seed)?;
    let fitted = mean_model.predict(&x)?;
    let residuals: Vec<f64> = e.iter().zip(&fitted).map(|(ei, mi)| ei - mi).collect();

    let conditional = match kind {
        DensityKind::Normal => {
            let var = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
            if !(var > 0.0) {
                return Err(Error::DegenerateExposure("mean model fits the exposure exactly".into()));
            }
            ConditionalDensity::Normal { sd: var.sqrt() }
        }
        DensityKind::Kernel => {
            let squared: Vec<f64> = residuals.iter().map(|r| r * r).collect();
            let variance_model = learner.fit(&x, &squared, rng_seed.wrapping_add(1))?;
            let sd: Vec<f64> = variance_model
                .predict(&x)?
                .into_iter()
                .map(|v| v.max(VARIANCE_FLOOR).sqrt())
                .collect();
            let standardized: Vec<f64> = residuals.iter().zip(&sd).map(|(r, s)| r / s).collect();
            let bandwidth = silverman_bandwidth(&standardized)
                .map_err(|e| Error::DegenerateExposure(e.to_string()))?;
            ConditionalDensity::Kernel {
                variance_model,
                standardized_residuals: standardized,
                bandwidth,
            }
        }
    };
    let marginal = MarginalDensity::fit(e, kind)?;
    let model = GpsModel {
        kind,
        features: features.clone(),
        mean_model,
        conditional,
        marginal,
    };
    let stats = model.conditional_stats(ds)?;
    let gps: Vec<f64> = e
        .par_iter()
        .zip(stats.mean.par_iter().zip(stats.sd.par_iter()))
        .map(|(&ei, (&m, &s))| model.density(ei, m, s))
        .collect();
    let marginal = model.marginal.evaluate(e);
    Ok(GpsEstimate {
        ids: ds.ids().to_vec(),
        gps,
        marginal,
        model: Some(model),
    })
}

/// Fits the GPS model on `ds` and evaluates it at the observed exposures.
pub fn estimate_gps(
    ds: &Dataset,
    kind: DensityKind,
    learner: &LearnerSpec,
    rng_seed: u64,
    nthread: usize,
) -> Result<GpsEstimate> {
    crate::with_threads(nthread, || {
        estimate_gps_with_features(ds, &FeatureSpec::from_dataset(ds), kind, learner, rng_seed)
    })
}
