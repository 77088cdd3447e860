//! Covariate balance: weighted absolute correlation (AC) between the exposure
//! and each covariate, before and after pseudo-population construction.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{quantile_sorted, ColumnData, Dataset};
use crate::error::{Error, Result};
use crate::pseudo_pop::PseudoPopulation;

/// Which summary of the covariate ACs is compared with the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdType {
    #[default]
    Maximal,
    Mean,
    Median,
}

impl std::str::FromStr for ThresholdType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximal" => Ok(ThresholdType::Maximal),
            "mean" => Ok(ThresholdType::Mean),
            "median" => Ok(ThresholdType::Median),
            other => Err(Error::InvalidArgument(format!("unknown threshold type `{other}`"))),
        }
    }
}

impl std::fmt::Display for ThresholdType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ThresholdType::Maximal => "maximal",
            ThresholdType::Mean => "mean",
            ThresholdType::Median => "median",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcSummary {
    pub mean_ac: f64,
    pub median_ac: f64,
    pub max_ac: f64,
}

impl AcSummary {
    pub fn from_values(acs: &[f64]) -> Self {
        if acs.is_empty() {
            return AcSummary {
                mean_ac: 0.0,
                median_ac: 0.0,
                max_ac: 0.0,
            };
        }
        let mut sorted = acs.to_vec();
        sorted.sort_by(f64::total_cmp);
        AcSummary {
            mean_ac: acs.iter().sum::<f64>() / acs.len() as f64,
            median_ac: quantile_sorted(&sorted, 0.5),
            max_ac: sorted[sorted.len() - 1],
        }
    }

    pub fn get(&self, t: ThresholdType) -> f64 {
        match t {
            ThresholdType::Maximal => self.max_ac,
            ThresholdType::Mean => self.mean_ac,
            ThresholdType::Median => self.median_ac,
        }
    }
}

/// Per-covariate ACs in dataset column order plus their summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcTable {
    pub values: Vec<(String, f64)>,
    pub summary: AcSummary,
}

impl AcTable {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Weighted Pearson correlation with weights acting as frequencies.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(Error::InvalidArgument("vectors differ in length".into()));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::DegenerateVariance("weights sum to zero".into()));
    }
    let mx = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let my = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::DegenerateVariance("zero weighted variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn covariate_ac(exposure: &[f64], values: &[f64], w: &[f64], name: &str) -> Result<f64> {
    match weighted_pearson(exposure, values, w) {
        Ok(r) => Ok(r.abs()),
        Err(Error::DegenerateVariance(_)) => {
            log::warn!("covariate `{name}` is constant in the pseudo-population; AC set to 0");
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

/// ACs of every covariate of `ds` under `weights`; zero-weight rows are
/// dropped first. Categorical covariates report the largest AC over their
/// level indicators.
pub fn ac_table(ds: &Dataset, weights: &[f64]) -> Result<AcTable> {
    if weights.len() != ds.len() {
        return Err(Error::InvalidArgument("weights not aligned with dataset".into()));
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| weights[i] > 0.0).collect();
    if keep.len() < 2 {
        return Err(Error::DegenerateVariance(format!(
            "{} positively weighted rows",
            keep.len()
        )));
    }
    let e: Vec<f64> = keep.iter().map(|&i| ds.exposure()[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
    let wsum: f64 = w.iter().sum();
    let me = w.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / wsum;
    if !(w.iter().zip(&e).map(|(a, b)| a * (b - me) * (b - me)).sum::<f64>() > 0.0) {
        return Err(Error::DegenerateVariance("exposure is constant".into()));
    }
    let mut values = Vec::with_capacity(ds.covariates().len());
    for c in ds.covariates() {
        let ac = match &c.data {
            ColumnData::Numeric(v) => {
                let v: Vec<f64> = keep.iter().map(|&i| v[i]).collect();
                covariate_ac(&e, &v, &w, &c.name)?
            }
            ColumnData::Categorical { levels, codes } => {
                let mut best: f64 = 0.0;
                for k in 0..levels.len() {
                    let ind: Vec<f64> = keep
                        .iter()
                        .map(|&i| if codes[i] == k { 1.0 } else { 0.0 })
                        .collect();
                    let ac = match weighted_pearson(&e, &ind, &w) {
                        Ok(r) => r.abs(),
                        Err(Error::DegenerateVariance(_)) => 0.0,
                        Err(err) => return Err(err),
                    };
                    best = best.max(ac);
                }
                best
            }
        };
        values.push((c.name.clone(), ac));
    }
    let acs: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    Ok(AcTable {
        summary: AcSummary::from_values(&acs),
        values,
    })
}

/// ACs of a pseudo-population under its own weights.
pub fn absolute_correlations(pp: &PseudoPopulation) -> Result<AcTable> {
    ac_table(pp.data(), pp.weights())
}

/// True iff the selected summary is strictly below `threshold`.
pub fn check_balance(summary: &AcSummary, threshold: f64, threshold_type: ThresholdType) -> bool {
    summary.get(threshold_type) < threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    #[serde(rename = "covariate")]
    pub name: String,
    pub original_ac: f64,
    pub adjusted_ac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub original: AcSummary,
    pub adjusted: AcSummary,
    pub threshold: f64,
    pub threshold_type: ThresholdType,
    pub passed: bool,
}

impl BalanceReport {
    pub fn from_tables(
        original: &AcTable,
        adjusted: &AcTable,
        threshold: f64,
        threshold_type: ThresholdType,
    ) -> Result<Self> {
        let covariates = original
            .values
            .iter()
            .map(|(name, o)| {
                let a = adjusted
                    .get(name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))?;
                Ok(CovariateBalance {
                    name: name.clone(),
                    original_ac: *o,
                    adjusted_ac: a,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BalanceReport {
            covariates,
            original: original.summary,
            adjusted: adjusted.summary,
            threshold,
            threshold_type,
            passed: check_balance(&adjusted.summary, threshold, threshold_type),
        })
    }

    /// Builds a report from per-covariate `(name, original, adjusted)` values.
    pub fn from_values(
        rows: Vec<CovariateBalance>,
        threshold: f64,
        threshold_type: ThresholdType,
    ) -> Self {
        let orig: Vec<f64> = rows.iter().map(|r| r.original_ac).collect();
        let adj: Vec<f64> = rows.iter().map(|r| r.adjusted_ac).collect();
        let adjusted = AcSummary::from_values(&adj);
        BalanceReport {
            covariates: rows,
            original: AcSummary::from_values(&orig),
            adjusted,
            threshold,
            threshold_type,
            passed: check_balance(&adjusted, threshold, threshold_type),
        }
    }

    /// Original ACs under uniform weights on `pp`'s rows, adjusted ACs under
    /// `pp`'s weights.
    pub fn for_pseudopop(pp: &PseudoPopulation, threshold: f64, threshold_type: ThresholdType) -> Result<Self> {
        let original = ac_table(pp.data(), &vec![1.0; pp.len()])?;
        let adjusted = absolute_correlations(pp)?;
        BalanceReport::from_tables(&original, &adjusted, threshold, threshold_type)
    }

    pub fn adjusted_statistic(&self) -> f64 {
        self.adjusted.get(self.threshold_type)
    }

    /// `covariate,original_ac,adjusted_ac` rows followed by `#` summary lines.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("covariate,original_ac,adjusted_ac\n");
        for c in &self.covariates {
            out.push_str(&format!("{},{},{}\n", c.name, c.original_ac, c.adjusted_ac));
        }
        for (label, s) in [("original", &self.original), ("adjusted", &self.adjusted)] {
            out.push_str(&format!(
                "# {label}: mean_ac={} median_ac={} max_ac={}\n",
                s.mean_ac, s.median_ac, s.max_ac
            ));
        }
        out.push_str(&format!(
            "# threshold={} threshold_type={} passed={}\n",
            self.threshold, self.threshold_type, self.passed
        ));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads the per-covariate rows of a report file; summaries are
    /// recomputed for the given threshold.
    pub fn read_csv(path: &Path, threshold: f64, threshold_type: ThresholdType) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let rows = reader
            .deserialize::<CovariateBalance>()
            .map(|r| r.map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(BalanceReport::from_values(rows, threshold, threshold_type))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Covariate;
    use crate::pseudo_pop::{Approach, Provenance};
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let x = [0.0, 1.0, 2.0, 3.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        assert!((weighted_pearson(&x, &y, &[1.0, 2.0, 0.5, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let r = weighted_pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0], &[1.0; 3]).unwrap();
        assert!(r.abs() < 1e-15);
        // 40-digit evaluation of the weighted-moment formula: -0.17407765595569...
        let r = weighted_pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0], &[1.0, 1.0, 2.0]).unwrap();
        assert!((r - (-0.174_077_655_955_697_8)).abs() < 1e-12);
        assert!(matches!(
            weighted_pearson(&[1.0, 1.0], &[0.0, 1.0], &[1.0, 1.0]),
            Err(Error::DegenerateVariance(_))
        ));
    }

    fn pp(e: Vec<f64>, covs: Vec<Covariate>, w: Vec<f64>) -> PseudoPopulation {
        let ds = Dataset::with_default_ids(e, covs, None).unwrap();
        PseudoPopulation::new(ds, w, Approach::Weighting, Provenance::default()).unwrap()
    }

    #[test]
    fn uniform_weights_equal_unweighted_pearson() {
        let e = vec![0.3, 1.2, -0.5, 2.2, 0.9, -1.4];
        let c = vec![1.0, 0.5, -0.2, 1.9, 0.1, -0.7];
        let p = pp(e.clone(), vec![Covariate::numeric("c", c.clone())], vec![2.5; 6]);
        let t = absolute_correlations(&p).unwrap();
        let n = 6.0;
        let (me, mc) = (e.iter().sum::<f64>() / n, c.iter().sum::<f64>() / n);
        let sxy: f64 = e.iter().zip(&c).map(|(a, b)| (a - me) * (b - mc)).sum();
        let sxx: f64 = e.iter().map(|a| (a - me).powi(2)).sum();
        let syy: f64 = c.iter().map(|b| (b - mc).powi(2)).sum();
        let r = (sxy / (sxx * syy).sqrt()).abs();
        assert!((t.values[0].1 - r).abs() < 1e-14);
        assert_eq!(t.summary.mean_ac, t.values[0].1);
        assert_eq!(t.summary.median_ac, t.values[0].1);
        assert_eq!(t.summary.max_ac, t.values[0].1);
    }

    #[test]
    fn summary_arithmetic() {
        let s = AcSummary::from_values(&[0.05, 0.15]);
        assert!((s.mean_ac - 0.10).abs() < 1e-15);
        assert!((s.median_ac - 0.10).abs() < 1e-15);
        assert_eq!(s.max_ac, 0.15);
    }

    #[test]
    fn threshold_checks() {
        let s = AcSummary::from_values(&[0.05, 0.09]);
        assert!(check_balance(&s, 0.1, ThresholdType::Maximal));
        let s = AcSummary {
            mean_ac: 0.10,
            median_ac: 0.10,
            max_ac: 0.15,
        };
        assert!(!check_balance(&s, 0.1, ThresholdType::Mean));
        assert!(!check_balance(&s, 0.1, ThresholdType::Maximal));
        assert!(!check_balance(&s, 0.1, ThresholdType::Median));
    }

    #[test]
    fn constant_covariate_gets_zero() {
        let p = pp(
            vec![1.0, 2.0, 3.0],
            vec![
                Covariate::numeric("flat", vec![4.0; 3]),
                Covariate::numeric("slope", vec![1.0, 2.0, 3.0]),
            ],
            vec![1.0; 3],
        );
        let t = absolute_correlations(&p).unwrap();
        assert_eq!(t.get("flat"), Some(0.0));
        assert!((t.get("slope").unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn categorical_uses_max_over_levels() {
        let e = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let labels = ["a", "a", "b", "b", "c", "c"];
        let p = pp(e.clone(), vec![Covariate::categorical("g", &labels)], vec![1.0; 6]);
        let t = absolute_correlations(&p).unwrap();
        let mut best: f64 = 0.0;
        for l in ["a", "b", "c"] {
            let ind: Vec<f64> = labels.iter().map(|x| if *x == l { 1.0 } else { 0.0 }).collect();
            best = best.max(weighted_pearson(&e, &ind, &[1.0; 6]).unwrap().abs());
        }
        assert_eq!(t.get("g"), Some(best));
    }

    #[test]
    fn zero_weight_rows_do_not_matter() {
        let e = vec![0.1, 0.7, 1.5, 2.0, 2.4];
        let c = vec![3.0, -1.0, 0.4, 0.8, 2.2];
        let full = pp(e.clone(), vec![Covariate::numeric("c", c.clone())], vec![2.0, 0.0, 1.0, 0.0, 3.0]);
        let dropped = pp(
            vec![0.1, 1.5, 2.4],
            vec![Covariate::numeric("c", vec![3.0, 0.4, 2.2])],
            vec![2.0, 1.0, 3.0],
        );
        assert_eq!(absolute_correlations(&full).unwrap(), absolute_correlations(&dropped).unwrap());
    }

    #[test]
    fn report_round_trip_and_pass_flag() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("balance.csv");
        let report = BalanceReport::from_values(
            vec![
                CovariateBalance {
                    name: "a".into(),
                    original_ac: 0.4,
                    adjusted_ac: 0.05,
                },
                CovariateBalance {
                    name: "b".into(),
                    original_ac: 0.2,
                    adjusted_ac: 0.09,
                },
            ],
            0.1,
            ThresholdType::Maximal,
        );
        assert!(report.passed);
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("covariate,original_ac,adjusted_ac\na,0.4,0.05\n"));
        assert!(text.contains("# threshold=0.1 threshold_type=maximal passed=true"));
        let back = BalanceReport::read_csv(&path, 0.1, ThresholdType::Maximal).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn affine_invariance(
            rows in prop::collection::vec((-10f64..10.0, -10f64..10.0, 0.1f64..5.0), 4..40),
            a in -5f64..5.0,
            b in 0.1f64..10.0,
            c in -5f64..5.0,
            d in 0.1f64..10.0,
        ) {
            let e: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let base = match weighted_pearson(&e, &x, &w) {
                Ok(r) => r.abs(),
                Err(_) => return Ok(()),
            };
            let e2: Vec<f64> = e.iter().map(|v| a + b * v).collect();
            let x2: Vec<f64> = x.iter().map(|v| c + d * v).collect();
            let scaled = weighted_pearson(&e2, &x2, &w).unwrap().abs();
            prop_assert!((base - scaled).abs() < 1e-12);
        }
    }
}
