//! A dataset with one weight per row, produced by matching or weighting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, CovariateKind, CsvSchema, Dataset, QuantilePair};
use crate::error::{Error, Result};
use crate::learners::HyperParams;
use crate::matching::MatchConfig;
use crate::weighting::WeightConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Matching,
    Weighting,
}

impl Approach {
    pub fn weight_column(&self) -> &'static str {
        match self {
            Approach::Matching => "counter_weight",
            Approach::Weighting => "stabilized_weight",
        }
    }
}

impl std::str::FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matching" => Ok(Approach::Matching),
            "weighting" => Ok(Approach::Weighting),
            other => Err(Error::InvalidArgument(format!("unknown approach `{other}`"))),
        }
    }
}

/// Where a pseudo-population came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub exposure_trim: Option<QuantilePair>,
    pub gps_trim: Option<QuantilePair>,
    pub match_config: Option<MatchConfig>,
    pub weight_config: Option<WeightConfig>,
    pub hyperparams: Option<HyperParams>,
    /// Exposure levels whose caliper held no donors.
    pub skipped_bins: Vec<f64>,
    /// Number of exposure levels that contributed matches.
    pub matched_bins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPopulation {
    data: Dataset,
    weights: Vec<f64>,
    approach: Approach,
    pub provenance: Provenance,
}

impl PseudoPopulation {
    pub fn new(data: Dataset, weights: Vec<f64>, approach: Approach, provenance: Provenance) -> Result<Self> {
        if weights.len() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} rows",
                weights.len(),
                data.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(PseudoPopulation {
            data,
            weights,
            approach,
            provenance,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn approach(&self) -> Approach {
        self.approach
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Rows with strictly positive weight.
    pub fn positive_rows(&self) -> PseudoPopulation {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        PseudoPopulation {
            data: self.data.select_rows(&keep),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            approach: self.approach,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes `id, <exposure>, covariates..., [<outcome>], <weight column>`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let ds = &self.data;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), ds.exposure_name().to_string()];
        header.extend(ds.covariates().iter().map(|c| c.name.clone()));
        if ds.outcome().is_some() {
            header.push(ds.outcome_name().to_string());
        }
        header.push(self.approach.weight_column().to_string());
        w.write_record(&header)?;
        for i in 0..ds.len() {
            let mut rec = vec![ds.ids()[i].to_string(), ds.exposure()[i].to_string()];
            rec.extend(ds.covariates().iter().map(|c| c.data.cell(i)));
            if let Some(y) = ds.outcome() {
                rec.push(y[i].to_string());
            }
            rec.push(self.weights[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`PseudoPopulation::write_csv`]. Every column
    /// other than id, exposure, outcome and the weight is a covariate;
    /// those listed in `categorical` are read as categorical.
    pub fn read_csv(
        path: &Path,
        exposure_col: &str,
        outcome_col: Option<&str>,
        categorical: &[String],
    ) -> Result<PseudoPopulation> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let approach = if headers.iter().any(|h| h == "counter_weight") {
            Approach::Matching
        } else if headers.iter().any(|h| h == "stabilized_weight") {
            Approach::Weighting
        } else {
            return Err(Error::MissingColumn("counter_weight or stabilized_weight".into()));
        };
        let weight_col = approach.weight_column();
        let outcome_col = outcome_col.filter(|o| headers.iter().any(|h| h == o));
        let covariates: Vec<(String, CovariateKind)> = headers
            .iter()
            .filter(|h| {
                h.as_str() != "id"
                    && h.as_str() != exposure_col
                    && Some(h.as_str()) != outcome_col
                    && h.as_str() != weight_col
            })
            .map(|h| {
                let kind = if categorical.contains(h) {
                    CovariateKind::Categorical
                } else {
                    CovariateKind::Numeric
                };
                (h.clone(), kind)
            })
            .collect();
        let schema = CsvSchema {
            exposure_col: exposure_col.to_string(),
            covariates,
            outcome_col: outcome_col.map(str::to_string),
            id_col: Some("id".into()),
        };
        let data = load_csv(path, &schema)?;
        let weight_schema = CsvSchema {
            exposure_col: weight_col.to_string(),
            ..Default::default()
        };
        let weights = load_csv(path, &weight_schema)?.exposure().to_vec();
        PseudoPopulation::new(data, weights, approach, Provenance::default())
    }
}
