//! Core data model: exposures, typed covariates, optional outcome, and
//! stable row identifiers that survive trimming.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable row identifier. Trimming never renumbers ids.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ObservationId(pub u64);

impl fmt::Display for ObservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// `codes[i]` indexes into `levels`. Levels are sorted; the first one is
    /// the reference level dropped by one-hot encoding.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> CovariateKind {
        match self {
            ColumnData::Numeric(_) => CovariateKind::Numeric,
            ColumnData::Categorical { .. } => CovariateKind::Categorical,
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Categorical { levels, codes } => ColumnData::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&i| codes[i]).collect(),
            },
        }
    }

    /// Text rendering of row `i`, used by CSV writers.
    pub fn cell(&self, i: usize) -> String {
        match self {
            ColumnData::Numeric(v) => v[i].to_string(),
            ColumnData::Categorical { levels, codes } => levels[codes[i]].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub data: ColumnData,
}

impl Covariate {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            name: name.into(),
            data: ColumnData::Numeric(values),
        }
    }

    /// Builds a categorical covariate from raw labels; levels are the sorted
    /// distinct labels.
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Self {
        let levels: Vec<String> = labels
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let codes = labels
            .iter()
            .map(|s| levels.binary_search_by(|l| l.as_str().cmp(s.as_ref())).unwrap())
            .collect();
        Covariate {
            name: name.into(),
            data: ColumnData::Categorical { levels, codes },
        }
    }
}

/// Exposure, covariates and optional outcome for `N >= 1` units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    ids: Vec<ObservationId>,
    exposure_name: String,
    exposure: Vec<f64>,
    covariates: Vec<Covariate>,
    outcome_name: String,
    outcome: Option<Vec<f64>>,
}

impl Dataset {
    /// Validates column lengths, finiteness, id uniqueness and column names.
    pub fn new(
        ids: Vec<ObservationId>,
        exposure: Vec<f64>,
        covariates: Vec<Covariate>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = exposure.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if ids.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} ids for {n} exposure values",
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId(id.0));
            }
        }
        if let Some(i) = exposure.iter().position(|e| !e.is_finite()) {
            return Err(Error::InvalidDataset(format!("exposure at row {i} is not finite")));
        }
        let mut names = HashSet::new();
        for c in &covariates {
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate column `{}`", c.name)));
            }
            if c.data.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "covariate `{}` has {} rows, expected {n}",
                    c.name,
                    c.data.len()
                )));
            }
            match &c.data {
                ColumnData::Numeric(v) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidDataset(format!(
                            "covariate `{}` has non-finite values",
                            c.name
                        )));
                    }
                }
                ColumnData::Categorical { levels, codes } => {
                    if levels.is_empty() || codes.iter().any(|&k| k >= levels.len()) {
                        return Err(Error::InvalidDataset(format!(
                            "categorical covariate `{}` has invalid levels",
                            c.name
                        )));
                    }
                }
            }
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "outcome has {} rows, expected {n}",
                    y.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset("outcome has non-finite values".into()));
            }
        }
        Ok(Dataset {
            ids,
            exposure_name: "exposure".into(),
            exposure,
            covariates,
            outcome_name: "outcome".into(),
            outcome,
        })
    }

    /// Convenience constructor assigning ids `0..N`.
    pub fn with_default_ids(
        exposure: Vec<f64>,
        covariates: Vec<Covariate>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ids = (0..exposure.len() as u64).map(ObservationId).collect();
        Dataset::new(ids, exposure, covariates, outcome)
    }

    pub fn with_column_names(
        mut self,
        exposure_name: impl Into<String>,
        outcome_name: impl Into<String>,
    ) -> Self {
        self.exposure_name = exposure_name.into();
        self.outcome_name = outcome_name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.exposure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exposure.is_empty()
    }

    pub fn ids(&self) -> &[ObservationId] {
        &self.ids
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    pub fn exposure_name(&self) -> &str {
        &self.exposure_name
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// Subset of rows, in the order given. Ids are carried over unchanged.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            exposure_name: self.exposure_name.clone(),
            exposure: rows.iter().map(|&i| self.exposure[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    data: c.data.select(rows),
                })
                .collect(),
            outcome_name: self.outcome_name.clone(),
            outcome: self
                .outcome
                .as_ref()
                .map(|y| rows.iter().map(|&i| y[i]).collect()),
        }
    }

    /// Writes `id, <exposure>, covariates..., [<outcome>]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), self.exposure_name.clone()];
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        if self.outcome.is_some() {
            header.push(self.outcome_name.clone());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].to_string(), self.exposure[i].to_string()];
            rec.extend(self.covariates.iter().map(|c| c.data.cell(i)));
            if let Some(y) = &self.outcome {
                rec.push(y[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Column mapping for [`load_csv`].
#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    pub exposure_col: String,
    pub covariates: Vec<(String, CovariateKind)>,
    pub outcome_col: Option<String>,
    pub id_col: Option<String>,
}

fn parse_finite(cell: &str, row: usize, column: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{cell}` is not finite"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{cell}` is not a number"),
        }),
    }
}

/// Reads a headered CSV file. Rows are numbered from 1 (the first data row)
/// in parse errors. Without `id_col`, ids are `0..N` in file order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let exposure_idx = col(&schema.exposure_col)?;
    let id_idx = schema.id_col.as_deref().map(col).transpose()?;
    let outcome_idx = schema.outcome_col.as_deref().map(col).transpose()?;
    let cov_idx = schema
        .covariates
        .iter()
        .map(|(name, _)| col(name))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut exposure = Vec::new();
    let mut outcome = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); schema.covariates.len()];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); schema.covariates.len()];

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let get = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                row,
                column: name.to_string(),
                message: "missing cell".into(),
            })
        };
        exposure.push(parse_finite(get(exposure_idx, &schema.exposure_col)?, row, &schema.exposure_col)?);
        if let (Some(idx), Some(name)) = (id_idx, schema.id_col.as_deref()) {
            let cell = get(idx, name)?;
            let id = cell.trim().parse::<u64>().map_err(|_| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{cell}` is not a non-negative integer"),
            })?;
            ids.push(ObservationId(id));
        } else {
            ids.push(ObservationId(r as u64));
        }
        if let (Some(idx), Some(name)) = (outcome_idx, schema.outcome_col.as_deref()) {
            outcome.push(parse_finite(get(idx, name)?, row, name)?);
        }
        for (k, ((name, kind), &idx)) in schema.covariates.iter().zip(&cov_idx).enumerate() {
            let cell = get(idx, name)?;
            match kind {
                CovariateKind::Numeric => numeric[k].push(parse_finite(cell, row, name)?),
                CovariateKind::Categorical => {
                    let label = cell.trim();
                    if label.is_empty() {
                        return Err(Error::Parse {
                            row,
                            column: name.clone(),
                            message: "empty categorical cell".into(),
                        });
                    }
                    labels[k].push(label.to_string());
                }
            }
        }
    }

    let covariates = schema
        .covariates
        .iter()
        .enumerate()
        .map(|(k, (name, kind))| match kind {
            CovariateKind::Numeric => Covariate::numeric(name.clone(), std::mem::take(&mut numeric[k])),
            CovariateKind::Categorical => Covariate::categorical(name.clone(), &labels[k]),
        })
        .collect();
    let outcome = schema.outcome_col.as_ref().map(|_| outcome);
    let ds = Dataset::new(ids, exposure, covariates, outcome)?;
    Ok(ds.with_column_names(
        schema.exposure_col.clone(),
        schema.outcome_col.clone().unwrap_or_else(|| "outcome".into()),
    ))
}

/// Lower/upper probability pair used for trimming.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    lo: f64,
    hi: f64,
}

impl QuantilePair {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidQuantiles { lo, hi });
        }
        Ok(QuantilePair { lo, hi })
    }

    /// No trimming.
    pub fn full() -> Self {
        QuantilePair { lo: 0.0, hi: 1.0 }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl Default for QuantilePair {
    /// Default exposure trim: 1st to 99th percentile.
    fn default() -> Self {
        QuantilePair { lo: 0.01, hi: 0.99 }
    }
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Linear-interpolation quantile: `h = (n-1)p`, interpolate between the
/// order statistics at `floor(h)` and `floor(h)+1` (zero-based).
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, p))
}

/// Indices `i` (ascending) with `quantile(values, lo) <= values[i] <= quantile(values, hi)`.
pub fn trim_indices(values: &[f64], q: QuantilePair) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, q.lo);
    let hi = quantile_sorted(&sorted, q.hi);
    let keep: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= lo && v <= hi)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::AllRowsTrimmed);
    }
    Ok(keep)
}

pub fn trim_by_exposure_quantiles(ds: &Dataset, q: QuantilePair) -> Result<Dataset> {
    let keep = trim_indices(ds.exposure(), q)?;
    Ok(ds.select_rows(&keep))
}

pub fn trim_by_gps_quantiles(ds: &Dataset, gps: &[f64], q: QuantilePair) -> Result<Dataset> {
    if gps.len() != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gps values for {} rows",
            gps.len(),
            ds.len()
        )));
    }
    let keep = trim_indices(gps, q)?;
    Ok(ds.select_rows(&keep))
}
