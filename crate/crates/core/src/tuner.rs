//! The pseudo-population search loop: estimate the GPS under sampled
//! hyperparameters and accumulated covariate transforms until covariate
//! balance passes or attempts run out.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::balance::{ac_table, AcSummary, AcTable, BalanceReport, ThresholdType};
use crate::dataset::{trim_by_exposure_quantiles, trim_indices, ColumnData, Covariate, Dataset, QuantilePair};
use crate::error::{Error, Result};
use crate::gps::{estimate_gps_with_features, DensityKind, FeatureSpec};
use crate::learners::{sample_hyperparams, HyperParamGrid, HyperParams, LearnerSpec};
use crate::matching::{matched_pseudopop, MatchConfig};
use crate::pseudo_pop::{Approach, PseudoPopulation};
use crate::weighting::{generate_weighted_pseudopop, WeightConfig};

/// A univariate covariate transform.
#[derive(Clone)]
pub enum Transformer {
    Pow2,
    Pow3,
    Custom {
        name: String,
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl Transformer {
    pub fn custom(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Transformer::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Transformer::Pow2 => "pow2",
            Transformer::Pow3 => "pow3",
            Transformer::Custom { name, .. } => name,
        }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        match self {
            Transformer::Pow2 => values.iter().map(|v| v * v).collect(),
            Transformer::Pow3 => values.iter().map(|v| v * v * v).collect(),
            Transformer::Custom { f, .. } => values.iter().map(|v| f(*v)).collect(),
        }
    }
}

impl fmt::Debug for Transformer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Transformer({})", self.name())
    }
}

/// Transformers compare by name.
impl PartialEq for Transformer {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl Serialize for Transformer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl std::str::FromStr for Transformer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pow2" => Ok(Transformer::Pow2),
            "pow3" => Ok(Transformer::Pow3),
            other => Err(Error::InvalidArgument(format!("unknown transformer `{other}`"))),
        }
    }
}

pub fn apply_transformer(t: &Transformer, column: &Covariate) -> Result<Vec<f64>> {
    match &column.data {
        ColumnData::Numeric(v) => Ok(t.apply(v)),
        ColumnData::Categorical { .. } => Err(Error::NonNumericColumn(column.name.clone())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TunerConfig {
    pub ci_appr: Approach,
    pub gps_density: DensityKind,
    pub exposure_trim_qtls: QuantilePair,
    pub gps_trim_qtls: QuantilePair,
    pub use_cov_transform: bool,
    pub transformers: Vec<Transformer>,
    pub learner: LearnerSpec,
    pub hyperparam_grid: HyperParamGrid,
    pub max_attempt: usize,
    pub covar_bl_trs: f64,
    pub covar_bl_trs_type: ThresholdType,
    pub match_cfg: MatchConfig,
    pub weight_cfg: WeightConfig,
    pub rng_seed: u64,
    /// Not serialized, so results do not depend on the thread count.
    #[serde(skip)]
    pub nthread: usize,
    pub include_original_data: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            ci_appr: Approach::Matching,
            gps_density: DensityKind::Normal,
            exposure_trim_qtls: QuantilePair::default(),
            gps_trim_qtls: QuantilePair::full(),
            use_cov_transform: false,
            transformers: vec![Transformer::Pow2, Transformer::Pow3],
            learner: LearnerSpec::Gbt(HyperParams::default()),
            hyperparam_grid: HyperParamGrid::default(),
            max_attempt: 10,
            covar_bl_trs: 0.1,
            covar_bl_trs_type: ThresholdType::Maximal,
            match_cfg: MatchConfig {
                delta_n: 1.0,
                scale: 0.5,
                dist_measure: Default::default(),
                bin_seq: None,
            },
            weight_cfg: WeightConfig::default(),
            rng_seed: 0,
            nthread: 1,
            include_original_data: false,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempt == 0 {
            return Err(Error::InvalidArgument("max_attempt must be >= 1".into()));
        }
        if self.use_cov_transform && self.transformers.is_empty() {
            return Err(Error::InvalidArgument(
                "covariate transforms requested but no transformers given".into(),
            ));
        }
        if !(self.covar_bl_trs > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covar_bl_trs must be > 0, got {}",
                self.covar_bl_trs
            )));
        }
        if self.nthread == 0 {
            return Err(Error::InvalidArgument("nthread must be >= 1".into()));
        }
        self.hyperparam_grid.validate()?;
        match self.ci_appr {
            Approach::Matching => self.match_cfg.validate(),
            Approach::Weighting => WeightConfig::new(self.weight_cfg.cap).map(|_| ()),
        }
    }
}

/// One line of the attempt log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub seed: u64,
    /// Sampled hyperparameters; absent when the learner has none.
    pub hyperparams: Option<HyperParams>,
    /// Transforms in effect for this attempt's GPS model.
    pub transforms: Vec<(String, Vec<String>)>,
    /// `(covariate, transformer)` queued for the next attempt.
    pub transform_applied: Option<(String, String)>,
    pub summary: Option<AcSummary>,
    pub statistic: Option<f64>,
    pub passed: bool,
    pub error: Option<String>,
}

impl AttemptRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("attempt records serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GpsUsedParams {
    pub attempt: usize,
    pub hyperparams: Option<HyperParams>,
    pub transforms: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TunerResult {
    pub params: TunerConfig,
    #[serde(skip)]
    pub pseudo_pop: PseudoPopulation,
    pub adjusted_corr_results: BalanceReport,
    /// ACs of the exposure-trimmed data under uniform weights.
    pub original_corr_results: AcTable,
    pub passed_covar_test: bool,
    pub best_gps_used_params: GpsUsedParams,
    pub attempts: Vec<AttemptRecord>,
}

impl TunerResult {
    pub fn attempts_jsonl(&self) -> String {
        self.attempts.iter().map(|a| a.to_json_line() + "\n").collect()
    }
}

struct Attempt {
    pp: PseudoPopulation,
    report: BalanceReport,
}

fn run_attempt(ds: &Dataset, cfg: &TunerConfig, features: &FeatureSpec, hp: HyperParams, seed: u64) -> Result<Attempt> {
    let learner = cfg.learner.with_hyperparams(hp);
    let gps = estimate_gps_with_features(ds, features, cfg.gps_density, &learner, seed)?;
    let keep = trim_indices(&gps.gps, cfg.gps_trim_qtls)?;
    let trimmed = ds.select_rows(&keep);
    let gps = gps.select_rows(&keep);
    let mut pp = match cfg.ci_appr {
        Approach::Matching => matched_pseudopop(&trimmed, &gps, &cfg.match_cfg)?,
        Approach::Weighting => generate_weighted_pseudopop(&trimmed, &gps, &cfg.weight_cfg)?,
    };
    pp.provenance.exposure_trim = Some(cfg.exposure_trim_qtls);
    pp.provenance.gps_trim = Some(cfg.gps_trim_qtls);
    pp.provenance.hyperparams = cfg.learner.uses_hyperparams().then_some(hp);
    let report = BalanceReport::for_pseudopop(&pp, cfg.covar_bl_trs, cfg.covar_bl_trs_type)?;
    Ok(Attempt { pp, report })
}

/// Numeric covariate with the largest adjusted AC; earliest column on ties.
fn transform_target(report: &BalanceReport, ds: &Dataset) -> Option<String> {
    let mut best: Option<(&str, f64)> = None;
    for c in &report.covariates {
        let numeric = matches!(ds.covariate(&c.name).map(|v| &v.data), Some(ColumnData::Numeric(_)));
        if numeric && best.is_none_or(|(_, ac)| c.adjusted_ac > ac) {
            best = Some((&c.name, c.adjusted_ac));
        }
    }
    best.map(|(n, _)| n.to_string())
}

/// Rows of `full` in their original order, weighted as in `pp` and zero
/// where `pp` has no such row.
fn with_original_rows(full: &Dataset, pp: PseudoPopulation) -> Result<PseudoPopulation> {
    let by_id: HashMap<_, _> = pp.data().ids().iter().zip(pp.weights()).map(|(id, w)| (*id, *w)).collect();
    let weights = full.ids().iter().map(|id| by_id.get(id).copied().unwrap_or(0.0)).collect();
    PseudoPopulation::new(full.clone(), weights, pp.approach(), pp.provenance)
}

pub fn generate_pseudo_pop(ds: &Dataset, cfg: &TunerConfig) -> Result<TunerResult> {
    cfg.validate()?;
    if ds.covariates().is_empty() {
        return Err(Error::InvalidDataset("no covariates".into()));
    }
    crate::with_threads(cfg.nthread, || search(ds, cfg))
}

fn search(ds: &Dataset, cfg: &TunerConfig) -> Result<TunerResult> {
    let trimmed = trim_by_exposure_quantiles(ds, cfg.exposure_trim_qtls)?;
    let original = ac_table(&trimmed, &vec![1.0; trimmed.len()])?;
    let mut features = FeatureSpec::from_dataset(&trimmed);
    let mut attempts = Vec::new();
    let mut best: Option<(usize, Attempt, GpsUsedParams)> = None;
    let mut last_error = None;

    for a in 1..=cfg.max_attempt {
        let seed = cfg.rng_seed.wrapping_add(a as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = sample_hyperparams(&cfg.hyperparam_grid, &mut rng);
        let used = GpsUsedParams {
            attempt: a,
            hyperparams: cfg.learner.uses_hyperparams().then_some(hp),
            transforms: features.transform_ledger(),
        };
        let mut record = AttemptRecord {
            attempt: a,
            seed,
            hyperparams: used.hyperparams,
            transforms: used.transforms.clone(),
            transform_applied: None,
            summary: None,
            statistic: None,
            passed: false,
            error: None,
        };
        match run_attempt(&trimmed, cfg, &features, hp, seed) {
            Ok(attempt) => {
                let stat = attempt.report.adjusted_statistic();
                record.summary = Some(attempt.report.adjusted);
                record.statistic = Some(stat);
                record.passed = attempt.report.passed;
                log::info!(
                    "attempt {a}/{}: mean_ac={:.6} median_ac={:.6} max_ac={:.6} {}={:.6} passed={}",
                    cfg.max_attempt,
                    attempt.report.adjusted.mean_ac,
                    attempt.report.adjusted.median_ac,
                    attempt.report.adjusted.max_ac,
                    cfg.covar_bl_trs_type,
                    stat,
                    attempt.report.passed
                );
                let passed = attempt.report.passed;
                if !passed && cfg.use_cov_transform {
                    if let Some(target) = transform_target(&attempt.report, &trimmed) {
                        let t = cfg.transformers[(a - 1) % cfg.transformers.len()].clone();
                        record.transform_applied = Some((target.clone(), t.name().to_string()));
                        log::debug!("transforming `{target}` with {}", t.name());
                        features.push_transform(&target, t)?;
                    }
                }
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b, _)| stat < b.report.adjusted_statistic());
                if better {
                    best = Some((a, attempt, used));
                }
                attempts.push(record);
                if passed {
                    break;
                }
            }
            Err(e) => {
                log::info!("attempt {a}/{}: failed: {e}", cfg.max_attempt);
                record.error = Some(e.to_string());
                attempts.push(record);
                last_error = Some(e);
            }
        }
    }

    let Some((_, attempt, used)) = best else {
        let msg = last_error.map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::AllAttemptsFailedConstruction(msg));
    };
    let pseudo_pop = if cfg.include_original_data {
        with_original_rows(ds, attempt.pp)?
    } else {
        attempt.pp
    };
    Ok(TunerResult {
        params: cfg.clone(),
        pseudo_pop,
        passed_covar_test: attempt.report.passed,
        adjusted_corr_results: attempt.report,
        original_corr_results: original,
        best_gps_used_params: used,
        attempts,
    })
}
