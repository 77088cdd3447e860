//! Regression learners used to model the conditional mean and variance of
//! the exposure: weighted linear least squares, gradient-boosted regression
//! trees and a cross-validated stacked ensemble of both.

mod ensemble;
mod gbt;
mod linear;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ensemble::{fit_ensemble, simplex_least_squares, EnsembleModel};
pub use gbt::{fit_gbt, GbtModel};
pub use linear::{fit_linear, LinearModel};

/// Column-major feature matrix with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, n_rows: usize) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some(c) = columns.iter().position(|c| c.len() != n_rows) {
            return Err(Error::InvalidArgument(format!(
                "column `{}` has {} rows, expected {n_rows}",
                names[c],
                columns[c].len()
            )));
        }
        Ok(FeatureMatrix {
            names,
            columns,
            n_rows,
        })
    }

    /// Single unnamed-feature matrix (`x0`), handy for tests and 1-d fits.
    pub fn from_column(values: Vec<f64>) -> Self {
        let n_rows = values.len();
        FeatureMatrix {
            names: vec!["x0".into()],
            columns: vec![values],
            n_rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            n_rows: rows.len(),
        }
    }
}

/// Boosting hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub nrounds: usize,
    pub eta: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.nrounds == 0 {
            return Err(Error::InvalidArgument("nrounds must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta {} outside (0, 1]", self.eta)));
        }
        if !(self.min_child_weight >= 0.0) {
            return Err(Error::InvalidArgument("min_child_weight must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            nrounds: 20,
            eta: 0.3,
            max_depth: 4,
            min_child_weight: 1.0,
        }
    }
}

/// Candidate values for each hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParamGrid {
    pub nrounds: Vec<usize>,
    pub eta: Vec<f64>,
    pub max_depth: Vec<usize>,
    pub min_child_weight: Vec<f64>,
}

impl HyperParamGrid {
    pub fn singleton(hp: HyperParams) -> Self {
        HyperParamGrid {
            nrounds: vec![hp.nrounds],
            eta: vec![hp.eta],
            max_depth: vec![hp.max_depth],
            min_child_weight: vec![hp.min_child_weight],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nrounds.is_empty()
            || self.eta.is_empty()
            || self.max_depth.is_empty()
            || self.min_child_weight.is_empty()
        {
            return Err(Error::InvalidArgument(
                "every hyperparameter needs at least one candidate".into(),
            ));
        }
        for &nrounds in &self.nrounds {
            for &eta in &self.eta {
                for &mcw in &self.min_child_weight {
                    HyperParams {
                        nrounds,
                        eta,
                        max_depth: 0,
                        min_child_weight: mcw,
                    }
                    .validate()?;
                }
            }
        }
        Ok(())
    }
}

impl Default for HyperParamGrid {
    /// `max_depth` in {3,4,5} and `nrounds` in 10..=40, other fields at the
    /// boosting defaults.
    fn default() -> Self {
        HyperParamGrid {
            nrounds: (10..=40).collect(),
            eta: vec![0.3],
            max_depth: vec![3, 4, 5],
            min_child_weight: vec![1.0],
        }
    }
}

fn draw_index(rng: &mut dyn RngCore, len: usize) -> usize {
    // Multiply-shift keeps the draw count at exactly one u64 per field.
    ((rng.next_u64() as u128 * len as u128) >> 64) as usize
}

/// Draws each field uniformly from its candidate list.
///
/// Consumes exactly four `u64` values from `rng`, in field order
/// `nrounds, eta, max_depth, min_child_weight`, regardless of list sizes.
pub fn sample_hyperparams(grid: &HyperParamGrid, rng: &mut dyn RngCore) -> HyperParams {
    let nrounds = grid.nrounds[draw_index(rng, grid.nrounds.len())];
    let eta = grid.eta[draw_index(rng, grid.eta.len())];
    let max_depth = grid.max_depth[draw_index(rng, grid.max_depth.len())];
    let min_child_weight = grid.min_child_weight[draw_index(rng, grid.min_child_weight.len())];
    HyperParams {
        nrounds,
        eta,
        max_depth,
        min_child_weight,
    }
}

/// What to fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerSpec {
    Linear,
    Gbt(HyperParams),
    Ensemble {
        bases: Vec<LearnerSpec>,
        k_folds: usize,
    },
}

impl LearnerSpec {
    /// Linear + boosted trees, stacked with 5-fold CV.
    pub fn default_ensemble() -> Self {
        LearnerSpec::Ensemble {
            bases: vec![LearnerSpec::Linear, LearnerSpec::Gbt(HyperParams::default())],
            k_folds: 5,
        }
    }

    pub fn fit(&self, x: &FeatureMatrix, y: &[f64], seed: u64) -> Result<RegressionModel> {
        match self {
            LearnerSpec::Linear => fit_linear(x, y, None),
            LearnerSpec::Gbt(hp) => fit_gbt(x, y, hp),
            LearnerSpec::Ensemble { bases, k_folds } => fit_ensemble(x, y, bases, *k_folds, seed),
        }
    }

    /// Copy of this spec with every boosted learner using `hp`.
    pub fn with_hyperparams(&self, hp: HyperParams) -> LearnerSpec {
        match self {
            LearnerSpec::Linear => LearnerSpec::Linear,
            LearnerSpec::Gbt(_) => LearnerSpec::Gbt(hp),
            LearnerSpec::Ensemble { bases, k_folds } => LearnerSpec::Ensemble {
                bases: bases.iter().map(|b| b.with_hyperparams(hp)).collect(),
                k_folds: *k_folds,
            },
        }
    }

    pub fn uses_hyperparams(&self) -> bool {
        match self {
            LearnerSpec::Linear => false,
            LearnerSpec::Gbt(_) => true,
            LearnerSpec::Ensemble { bases, .. } => bases.iter().any(|b| b.uses_hyperparams()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Linear(LinearModel),
    Gbt(GbtModel),
    Ensemble(EnsembleModel),
}

/// A fitted learner together with the feature names it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    schema: Vec<String>,
    kind: ModelKind,
}

impl RegressionModel {
    pub(crate) fn new(schema: Vec<String>, kind: ModelKind) -> Self {
        RegressionModel { schema, kind }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.names() != self.schema.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "model trained on {:?}, got {:?}",
                self.schema,
                x.names()
            )));
        }
        Ok((0..x.n_rows()).map(|i| self.predict_row(x, i)).collect())
    }

    pub(crate) fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        match &self.kind {
            ModelKind::Linear(m) => m.predict_row(x, row),
            ModelKind::Gbt(m) => m.predict_row(x, row),
            ModelKind::Ensemble(m) => m.predict_row(x, row),
        }
    }
}
