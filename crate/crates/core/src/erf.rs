//! Exposure-response estimation on a pseudo-population: parametric GLM
//! coefficients, a natural cubic spline fit, and a local-linear smoother
//! with leave-one-out bandwidth selection and m-out-of-n bootstrap bands.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::quantile_sorted;
use crate::error::{Error, Result};
use crate::pseudo_pop::PseudoPopulation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    pub family: Family,
    pub intercept: f64,
    pub slope: f64,
    pub iterations: usize,
}

/// Evaluation grid plus estimates and optional pointwise bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfEstimate {
    pub w_vals: Vec<f64>,
    pub estimates: Vec<f64>,
    pub optimal_bw: Option<f64>,
    /// `(bandwidth, cv_risk)` for every bandwidth that produced a risk.
    pub risks: Vec<(f64, f64)>,
    pub ci_lower: Option<Vec<f64>>,
    pub ci_upper: Option<Vec<f64>>,
}

impl ErfEstimate {
    pub fn len(&self) -> usize {
        self.w_vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_vals.is_empty()
    }

    /// `w,erf,ci_lower,ci_upper`; CI cells are empty without bands.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("w,erf,ci_lower,ci_upper\n");
        for i in 0..self.len() {
            let lo = self.ci_lower.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            let hi = self.ci_upper.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{lo},{hi}\n", self.w_vals[i], self.estimates[i]));
        }
        write_text(path, &out)
    }

    /// `bandwidth,cv_risk`.
    pub fn write_risks_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bandwidth,cv_risk\n");
        for (h, r) in &self.risks {
            out.push_str(&format!("{h},{r}\n"));
        }
        write_text(path, &out)
    }

    pub fn read_csv(path: &Path) -> Result<ErfEstimate> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut est = ErfEstimate {
            w_vals: vec![],
            estimates: vec![],
            optimal_bw: None,
            risks: vec![],
            ci_lower: None,
            ci_upper: None,
        };
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        let mut banded = true;
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let cell = |k: usize| -> Result<Option<f64>> {
                let s = rec.get(k).unwrap_or("").trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| Error::Parse {
                    row: row + 1,
                    column: ["w", "erf", "ci_lower", "ci_upper"][k].into(),
                    message: format!("`{s}` is not a number"),
                })
            };
            let (Some(w), Some(y)) = (cell(0)?, cell(1)?) else {
                return Err(Error::Parse {
                    row: row + 1,
                    column: "w".into(),
                    message: "missing value".into(),
                });
            };
            est.w_vals.push(w);
            est.estimates.push(y);
            match (cell(2)?, cell(3)?) {
                (Some(a), Some(b)) => {
                    lo.push(a);
                    hi.push(b);
                }
                _ => banded = false,
            }
        }
        if est.is_empty() {
            return Err(Error::EmptyInput);
        }
        if banded {
            est.ci_lower = Some(lo);
            est.ci_upper = Some(hi);
        }
        Ok(est)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `(exposure, outcome, weight)` of positively weighted rows.
fn positive_rows(pp: &PseudoPopulation) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let y = pp
        .data()
        .outcome()
        .ok_or_else(|| Error::MissingColumn(pp.data().outcome_name().to_string()))?;
    let (mut e, mut yy, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..pp.len() {
        if pp.weights()[i] > 0.0 {
            e.push(pp.data().exposure()[i]);
            yy.push(y[i]);
            w.push(pp.weights()[i]);
        }
    }
    Ok((e, yy, w))
}

/// Weighted least squares of `y` on `(1, e)`.
fn wls_line(e: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let ws: f64 = w.iter().sum();
    let me = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ws;
    let my = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / ws;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..e.len() {
        sxx += w[i] * (e[i] - me) * (e[i] - me);
        sxy += w[i] * (e[i] - me) * (y[i] - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateDesign("exposure is constant".into()));
    }
    let slope = sxy / sxx;
    Ok((my - slope * me, slope))
}

const IRLS_TOL: f64 = 1e-10;
const IRLS_MAX_ITER: usize = 100;

pub fn estimate_pmetric_erf(pp: &PseudoPopulation, family: Family) -> Result<ParametricFit> {
    let (e, y, w) = positive_rows(pp)?;
    if e.len() < 3 {
        return Err(Error::DegenerateDesign(format!("{} positively weighted rows", e.len())));
    }
    match family {
        Family::Gaussian => {
            let (intercept, slope) = wls_line(&e, &y, &w)?;
            Ok(ParametricFit {
                family,
                intercept,
                slope,
                iterations: 1,
            })
        }
        Family::Poisson => poisson_irls(&e, &y, &w),
    }
}

fn poisson_irls(e: &[f64], y: &[f64], w: &[f64]) -> Result<ParametricFit> {
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("poisson outcome must be nonnegative".into()));
    }
    let ws: f64 = w.iter().sum();
    let ybar = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / ws;
    if !(ybar > 0.0) {
        return Err(Error::DegenerateDesign("poisson outcome is identically zero".into()));
    }
    let (mut b0, mut b1) = (ybar.ln(), 0.0);
    let mut ww = vec![0.0; e.len()];
    let mut z = vec![0.0; e.len()];
    for iter in 1..=IRLS_MAX_ITER {
        for i in 0..e.len() {
            let eta = b0 + b1 * e[i];
            let mu = eta.exp();
            ww[i] = w[i] * mu;
            z[i] = eta + (y[i] - mu) / mu;
        }
        let (n0, n1) = wls_line(e, &z, &ww)?;
        let delta = (n0 - b0).abs().max((n1 - b1).abs());
        b0 = n0;
        b1 = n1;
        if !(b0.is_finite() && b1.is_finite()) {
            return Err(Error::NonConvergence(iter));
        }
        if delta < IRLS_TOL {
            return Ok(ParametricFit {
                family: Family::Poisson,
                intercept: b0,
                slope: b1,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence(IRLS_MAX_ITER))
}

/// Natural cubic spline basis (intercept, linear term and `K - 2` truncated
/// cubic differences) for sorted knots `xi`, with `x` pre-scaled by the
/// boundary knots.
fn natural_spline_row(x: f64, xi: &[f64]) -> Vec<f64> {
    let k = xi.len();
    let cube = |t: f64| if t > 0.0 { t * t * t } else { 0.0 };
    let d = |j: usize| (cube(x - xi[j]) - cube(x - xi[k - 1])) / (xi[k - 1] - xi[j]);
    let mut row = Vec::with_capacity(k);
    row.push(1.0);
    row.push(x);
    let last = d(k - 2);
    for j in 0..k - 2 {
        row.push(d(j) - last);
    }
    row
}

/// Boundary knots at the extremes and `df - 1` interior knots at evenly
/// spaced quantiles, all rescaled to `[0, 1]`. Returns `(lo, span, knots)`.
fn spline_knots(e: &[f64], df: usize) -> Result<(f64, f64, Vec<f64>)> {
    let mut sorted = e.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let span = sorted[sorted.len() - 1] - lo;
    if !(span > 0.0) {
        return Err(Error::DegenerateDesign("exposure is constant".into()));
    }
    let knots: Vec<f64> = (0..=df)
        .map(|k| (quantile_sorted(&sorted, k as f64 / df as f64) - lo) / span)
        .collect();
    if knots.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::DegenerateDesign("repeated spline knots".into()));
    }
    Ok((lo, span, knots))
}

pub fn estimate_semipmetric_erf(pp: &PseudoPopulation, spline_df: usize, w_vals: &[f64]) -> Result<ErfEstimate> {
    if spline_df < 3 {
        return Err(Error::InvalidArgument(format!("spline_df must be >= 3, got {spline_df}")));
    }
    let (e, y, w) = positive_rows(pp)?;
    if e.len() <= spline_df + 1 {
        return Err(Error::DegenerateDesign(format!(
            "{} positively weighted rows for {spline_df} spline degrees of freedom",
            e.len()
        )));
    }
    let (lo, span, knots) = spline_knots(&e, spline_df)?;
    let p = knots.len();
    let mut x = DMatrix::zeros(e.len(), p);
    let mut rhs = DVector::zeros(e.len());
    for i in 0..e.len() {
        let sw = w[i].sqrt();
        for (j, v) in natural_spline_row((e[i] - lo) / span, &knots).into_iter().enumerate() {
            x[(i, j)] = sw * v;
        }
        rhs[i] = sw * y[i];
    }
    let qr = x.qr();
    let r = qr.r();
    let rmax = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..p).any(|j| r[(j, j)].abs() <= 1e-12 * rmax) {
        return Err(Error::DegenerateDesign("spline design is rank deficient".into()));
    }
    let qty = qr.q().transpose() * rhs;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::DegenerateDesign("spline design is rank deficient".into()))?;
    let estimates = w_vals
        .iter()
        .map(|&wv| {
            natural_spline_row((wv - lo) / span, &knots)
                .iter()
                .zip(beta.iter())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(ErfEstimate {
        w_vals: w_vals.to_vec(),
        estimates,
        optimal_bw: None,
        risks: vec![],
        ci_lower: None,
        ci_upper: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    start: f64,
    end: f64,
    step: f64,
}

impl BandwidthGrid {
    pub fn new(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(start > 0.0 && step > 0.0 && start <= end && end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth grid needs 0 < start <= end and step > 0, got ({start}, {end}, {step})"
            )));
        }
        Ok(BandwidthGrid { start, end, step })
    }

    /// `start + k * step` for every `k >= 0` with value `<= end + 1e-12`.
    pub fn candidates(&self) -> Vec<f64> {
        (0..)
            .map(|k| self.start + k as f64 * self.step)
            .take_while(|h| *h <= self.end + 1e-12)
            .collect()
    }
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        BandwidthGrid {
            start: 0.2,
            end: 1.0,
            step: 0.1,
        }
    }
}

/// Kernel-weighted first and second moments around an evaluation point.
#[derive(Clone, Copy, Default)]
struct LocalSums {
    s0: f64,
    s1: f64,
    s2: f64,
    t0: f64,
    t1: f64,
}

impl LocalSums {
    fn at(w: f64, h: f64, e: &[f64], y: &[f64], wt: &[f64]) -> Self {
        let mut s = LocalSums::default();
        for i in 0..e.len() {
            s.add(w, h, e[i], y[i], wt[i]);
        }
        s
    }

    fn add(&mut self, w: f64, h: f64, e: f64, y: f64, wt: f64) {
        let d = e - w;
        let z = d / h;
        let k = wt * (-0.5 * z * z).exp();
        self.s0 += k;
        self.s1 += k * d;
        self.s2 += k * d * d;
        self.t0 += k * y;
        self.t1 += k * d * y;
    }

    /// Intercept of the local line, `None` when the local design is singular.
    fn intercept(&self, h: f64) -> Option<f64> {
        if !(self.s0 > 0.0) {
            return None;
        }
        let m = self.s1 / self.s0;
        let sdd = self.s2 - self.s1 * m;
        if !(sdd > 1e-10 * h * h * self.s0) {
            return None;
        }
        let ybar = self.t0 / self.s0;
        let slope = (self.t1 - self.s1 * ybar) / sdd;
        Some(ybar - slope * m)
    }
}

/// Local-linear estimate at `w` with Gaussian kernel bandwidth `h`.
pub fn local_linear(w: f64, h: f64, e: &[f64], y: &[f64], wt: &[f64]) -> Option<f64> {
    LocalSums::at(w, h, e, y, wt).intercept(h)
}

/// Weighted leave-one-out risk at bandwidth `h`; `None` if any held-out fit
/// is singular.
pub fn loo_risk(h: f64, e: &[f64], y: &[f64], wt: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    for i in 0..e.len() {
        let mut s = LocalSums::default();
        for j in (0..e.len()).filter(|&j| j != i) {
            s.add(e[i], h, e[j], y[j], wt[j]);
        }
        let mu = s.intercept(h)?;
        num += wt[i] * (y[i] - mu) * (y[i] - mu);
    }
    Some(num / wt.iter().sum::<f64>())
}

pub fn estimate_npmetric_erf(
    outcome: &[f64],
    exposure: &[f64],
    weights: &[f64],
    grid: &BandwidthGrid,
    w_vals: &[f64],
) -> Result<ErfEstimate> {
    if outcome.len() != exposure.len() || weights.len() != exposure.len() {
        return Err(Error::InvalidArgument("outcome, exposure and weights differ in length".into()));
    }
    let keep: Vec<usize> = (0..exposure.len()).filter(|&i| weights[i] > 0.0).collect();
    let e: Vec<f64> = keep.iter().map(|&i| exposure[i]).collect();
    let y: Vec<f64> = keep.iter().map(|&i| outcome[i]).collect();
    let wt: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
    let mut distinct = e.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateDesign(
            "need at least two distinct positively weighted exposures".into(),
        ));
    }
    let candidates = grid.candidates();
    let risks: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|&h| loo_risk(h, &e, &y, &wt).map(|r| (h, r)))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if risks.is_empty() {
        return Err(Error::AllBandwidthsDegenerate);
    }
    let ws: f64 = wt.iter().sum();
    let scale = wt.iter().zip(&y).map(|(a, b)| a * b * b).sum::<f64>() / ws;
    let best = risks.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let h = risks
        .iter()
        .find(|r| r.1 <= best + 1e-12 * scale)
        .map(|r| r.0)
        .expect("minimum is attained");
    let estimates = w_vals
        .par_iter()
        .map(|&w| {
            local_linear(w, h, &e, &y, &wt)
                .ok_or_else(|| Error::DegenerateDesign(format!("singular local fit at w = {w}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErfEstimate {
        w_vals: w_vals.to_vec(),
        estimates,
        optimal_bw: Some(h),
        risks,
        ci_lower: None,
        ci_upper: None,
    })
}

/// Local-linear ERF of a pseudo-population.
pub fn estimate_npmetric_erf_pp(pp: &PseudoPopulation, grid: &BandwidthGrid, w_vals: &[f64]) -> Result<ErfEstimate> {
    let (e, y, w) = positive_rows(pp)?;
    estimate_npmetric_erf(&y, &e, &w, grid, w_vals)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Rows drawn per replicate.
    pub m: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub rng_seed: u64,
}

/// m-out-of-n bootstrap bands around the local-linear ERF.
///
/// Replicate `b` draws `m` positively weighted rows with replacement, with
/// a generator seeded by `rng_seed + b`, and refits with bandwidth
/// selection. The band is `estimate ± z * sqrt(m / n) * sd_b`.
pub fn bootstrap_erf_ci(
    pp: &PseudoPopulation,
    grid: &BandwidthGrid,
    w_vals: &[f64],
    cfg: &BootstrapConfig,
) -> Result<ErfEstimate> {
    let (e, y, w) = positive_rows(pp)?;
    let n = e.len();
    if cfg.m == 0 || cfg.m > n {
        return Err(Error::InvalidArgument(format!("m must be in 1..={n}, got {}", cfg.m)));
    }
    if cfg.replicates < 2 {
        return Err(Error::InvalidArgument("at least two bootstrap replicates are needed".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {}", cfg.alpha)));
    }
    let mut est = estimate_npmetric_erf(&y, &e, &w, grid, w_vals)?;
    let reps = (1..=cfg.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(b));
            let idx: Vec<usize> = (0..cfg.m).map(|_| rng.random_range(0..n)).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            estimate_npmetric_erf(&pick(&y), &pick(&e), &pick(&w), grid, w_vals).map(|r| r.estimates)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = Normal::standard().inverse_cdf(1.0 - cfg.alpha / 2.0);
    let factor = (cfg.m as f64 / n as f64).sqrt();
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for (k, mu) in est.estimates.iter().enumerate() {
        let draws: Vec<f64> = reps.iter().map(|r| r[k]).collect();
        let half = z * factor * crate::stats::sample_sd(&draws);
        lo.push(mu - half);
        hi.push(mu + half);
    }
    est.ci_lower = Some(lo);
    est.ci_upper = Some(hi);
    Ok(est)
}
