use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use causal_gps::balance::{BalanceReport, ThresholdType};
use causal_gps::dataset::{
    load_csv, quantile, trim_by_exposure_quantiles, CovariateKind, CsvSchema, Dataset, QuantilePair,
};
use causal_gps::erf::{
    bootstrap_erf_ci, estimate_npmetric_erf_pp, estimate_pmetric_erf, estimate_semipmetric_erf, BandwidthGrid,
    BootstrapConfig, ErfEstimate, Family,
};
use causal_gps::gps::{estimate_gps, DensityKind, GpsEstimate};
use causal_gps::learners::{HyperParamGrid, HyperParams, LearnerSpec};
use causal_gps::logging::{configure_logging, LogConfig, LogLevel};
use causal_gps::matching::MatchConfig;
use causal_gps::plot::{emit_balance_plot, emit_erf_plot};
use causal_gps::pseudo_pop::{Approach, PseudoPopulation};
use causal_gps::simulate::{simulate_dataset, ErfShape, SimConfig};
use causal_gps::tuner::{generate_pseudo_pop, Transformer, TunerConfig};
use causal_gps::weighting::{generate_weighted_pseudopop, WeightConfig};
use causal_gps::{with_threads, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "causalgps", version, about = "GPS matching and weighting for continuous exposures")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    nthread: usize,
    /// TRACE, DEBUG or INFO.
    #[arg(long, global = true, default_value = "INFO")]
    log_level: String,
    /// Append log records to this file instead of stderr.
    #[arg(long, global = true)]
    log_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic confounded dataset.
    Simulate(SimulateArgs),
    /// Estimate GPS values for every row.
    EstimateGps(EstimateGpsArgs),
    /// Build a balanced pseudo-population by matching or weighting.
    PseudoPop(PseudoPopArgs),
    /// Covariate balance of an existing pseudo-population.
    BalanceReport(BalanceArgs),
    /// Exposure-response estimation on a pseudo-population.
    EstimateErf(ErfArgs),
    /// SVG dot plot from a balance report CSV.
    PlotBalance(PlotBalanceArgs),
    /// SVG curve from an ERF CSV.
    PlotErf(PlotErfArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value = "linear")]
    erf_shape: String,
    #[arg(long)]
    heteroskedastic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `truth.json` next to the dataset.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "exposure")]
    exposure_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Covariates to read as categorical.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LearnerArg {
    Linear,
    Gbt,
    Ensemble,
}

impl LearnerArg {
    fn spec(self) -> LearnerSpec {
        match self {
            LearnerArg::Linear => LearnerSpec::Linear,
            LearnerArg::Gbt => LearnerSpec::Gbt(HyperParams::default()),
            LearnerArg::Ensemble => LearnerSpec::default_ensemble(),
        }
    }
}

#[derive(Args, Debug)]
struct EstimateGpsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "normal")]
    gps_density: String,
    #[arg(long, value_enum, default_value = "gbt")]
    learner: LearnerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PseudoPopArgs {
    #[command(flatten)]
    data: DataArgs,
    /// matching or weighting.
    #[arg(long)]
    ci_appr: String,
    #[arg(long, default_value = "normal")]
    gps_density: String,
    #[arg(long, value_enum, default_value = "gbt")]
    learner: LearnerArg,
    /// Lower and upper exposure quantiles, e.g. `0.01,0.99`.
    #[arg(long, default_value = "0.01,0.99")]
    exposure_trim: String,
    #[arg(long, default_value = "0,1")]
    gps_trim: String,
    #[arg(long)]
    use_cov_transform: bool,
    #[arg(long, value_delimiter = ',', default_value = "pow2,pow3")]
    transformers: Vec<String>,
    /// Values or `lo:hi` ranges, comma-separated.
    #[arg(long, default_value = "10:40")]
    nrounds: String,
    #[arg(long, value_delimiter = ',', default_value = "0.3")]
    eta: Vec<f64>,
    #[arg(long, default_value = "3,4,5")]
    max_depth: String,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    min_child_weight: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    max_attempt: usize,
    #[arg(long, default_value_t = 0.1)]
    covar_bl_trs: f64,
    #[arg(long, default_value = "maximal")]
    covar_bl_trs_type: String,
    /// Caliper; required for matching.
    #[arg(long)]
    delta_n: Option<f64>,
    /// GPS emphasis in the matching distance; required for matching.
    #[arg(long)]
    scale: Option<f64>,
    /// Explicit exposure levels for matching.
    #[arg(long, value_delimiter = ',')]
    bin_seq: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10.0)]
    weight_cap: f64,
    #[arg(long)]
    include_original_data: bool,
    /// Precomputed GPS values (weighting only); skips the tuning loop.
    #[arg(long)]
    gps_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BalanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    covar_bl_trs: f64,
    #[arg(long, default_value = "maximal")]
    covar_bl_trs_type: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ErfMethod {
    Pmetric,
    Semipmetric,
    Npmetric,
}

#[derive(Args, Debug)]
struct ErfArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "npmetric")]
    method: ErfMethod,
    #[arg(long, default_value = "gaussian")]
    family: String,
    #[arg(long, default_value_t = 4)]
    spline_df: usize,
    /// Bandwidth grid as `start,end,step`.
    #[arg(long, default_value = "0.2,1,0.1")]
    bw_seq: String,
    /// Evaluation grid as `start,end,step`; defaults to the 5th to 95th
    /// exposure percentiles in steps of 0.1.
    #[arg(long)]
    w_vals: Option<String>,
    /// Bootstrap replicates; 0 disables bands.
    #[arg(long, default_value_t = 0)]
    boot_b: usize,
    /// Rows per replicate; defaults to floor(n^0.9).
    #[arg(long)]
    boot_m: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PlotBalanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotErfArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn usage(flag: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("--{flag}: {msg}"))
}

fn parse_pair(flag: &str, s: &str) -> Result<QuantilePair> {
    let v = parse_floats(flag, s, 2)?;
    QuantilePair::new(v[0], v[1]).map_err(|e| usage(flag, e))
}

fn parse_floats(flag: &str, s: &str, n: usize) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| usage(flag, format!("`{s}` is not a list of numbers")))?;
    if v.len() != n {
        return Err(usage(flag, format!("expected {n} comma-separated values, got `{s}`")));
    }
    Ok(v)
}

/// `10,20,30:35` style integer lists.
fn parse_int_list(flag: &str, s: &str) -> Result<Vec<usize>> {
    let bad = || usage(flag, format!("`{s}` is not a list of integers or ranges"));
    let mut out = Vec::new();
    for part in s.split(',') {
        match part.split_once(':') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn parse_flag<T: std::str::FromStr<Err = Error>>(flag: &str, s: &str) -> Result<T> {
    s.parse().map_err(|e: Error| usage(flag, e))
}

fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    Ok(reader.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

const WEIGHT_COLUMNS: [&str; 2] = ["counter_weight", "stabilized_weight"];

impl DataArgs {
    fn schema(&self) -> Result<CsvSchema> {
        let headers = csv_headers(&self.input)?;
        let has = |c: &str| headers.iter().any(|h| h == c);
        let covariates = match &self.covariates {
            Some(c) => c.clone(),
            None => headers
                .iter()
                .filter(|h| {
                    h.as_str() != "id"
                        && **h != self.exposure_col
                        && **h != self.outcome_col
                        && !WEIGHT_COLUMNS.contains(&h.as_str())
                })
                .cloned()
                .collect(),
        };
        for c in &self.categorical {
            if !covariates.contains(c) {
                return Err(usage("categorical", format!("`{c}` is not a covariate")));
            }
        }
        Ok(CsvSchema {
            exposure_col: self.exposure_col.clone(),
            covariates: covariates
                .into_iter()
                .map(|c| {
                    let kind = if self.categorical.contains(&c) {
                        CovariateKind::Categorical
                    } else {
                        CovariateKind::Numeric
                    };
                    (c, kind)
                })
                .collect(),
            outcome_col: has(&self.outcome_col).then(|| self.outcome_col.clone()),
            id_col: has("id").then(|| "id".to_string()),
        })
    }

    fn load(&self) -> Result<Dataset> {
        load_csv(&self.input, &self.schema()?)
    }

    fn load_pseudo_pop(&self) -> Result<PseudoPopulation> {
        let headers = csv_headers(&self.input)?;
        let outcome = headers.iter().any(|h| *h == self.outcome_col).then_some(self.outcome_col.as_str());
        PseudoPopulation::read_csv(&self.input, &self.exposure_col, outcome, &self.categorical)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        n: a.n,
        erf_shape: parse_flag::<ErfShape>("erf-shape", &a.erf_shape)?,
        heteroskedastic: a.heteroskedastic,
        seed: a.seed,
    };
    let (ds, truth) = simulate_dataset(&cfg)?;
    ds.write_csv(&a.out)?;
    let truth_path = a
        .truth
        .clone()
        .unwrap_or_else(|| a.out.with_file_name("truth.json"));
    write_json(&truth_path, &truth)?;
    log::info!("simulated {} rows into {}", ds.len(), a.out.display());
    Ok(())
}

fn run_estimate_gps(a: &EstimateGpsArgs, nthread: usize) -> Result<()> {
    let kind = parse_flag::<DensityKind>("gps-density", &a.gps_density)?;
    let ds = a.data.load()?;
    let est = estimate_gps(&ds, kind, &a.learner.spec(), a.seed, nthread)?;
    est.write_csv(&a.out)?;
    log::info!("wrote GPS for {} rows to {}", est.len(), a.out.display());
    Ok(())
}

fn tuner_config(a: &PseudoPopArgs, nthread: usize) -> Result<TunerConfig> {
    let ci_appr = parse_flag::<Approach>("ci-appr", &a.ci_appr)?;
    let match_cfg = match ci_appr {
        Approach::Matching => {
            let delta_n = a
                .delta_n
                .ok_or_else(|| usage("delta-n", "required when --ci-appr matching"))?;
            let scale = a.scale.ok_or_else(|| usage("scale", "required when --ci-appr matching"))?;
            let mut cfg = MatchConfig::new(delta_n, scale).map_err(|e| usage("delta-n/--scale", e))?;
            cfg.bin_seq = a.bin_seq.clone();
            cfg.validate().map_err(|e| usage("bin-seq", e))?;
            cfg
        }
        Approach::Weighting => TunerConfig::default().match_cfg,
    };
    let transformers = a
        .transformers
        .iter()
        .map(|t| parse_flag::<Transformer>("transformers", t))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TunerConfig {
        ci_appr,
        gps_density: parse_flag("gps-density", &a.gps_density)?,
        exposure_trim_qtls: parse_pair("exposure-trim", &a.exposure_trim)?,
        gps_trim_qtls: parse_pair("gps-trim", &a.gps_trim)?,
        use_cov_transform: a.use_cov_transform,
        transformers,
        learner: a.learner.spec(),
        hyperparam_grid: HyperParamGrid {
            nrounds: parse_int_list("nrounds", &a.nrounds)?,
            eta: a.eta.clone(),
            max_depth: parse_int_list("max-depth", &a.max_depth)?,
            min_child_weight: a.min_child_weight.clone(),
        },
        max_attempt: a.max_attempt,
        covar_bl_trs: a.covar_bl_trs,
        covar_bl_trs_type: parse_flag("covar-bl-trs-type", &a.covar_bl_trs_type)?,
        match_cfg,
        weight_cfg: WeightConfig::new(a.weight_cap).map_err(|e| usage("weight-cap", e))?,
        rng_seed: a.seed,
        nthread,
        include_original_data: a.include_original_data,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Weighting with GPS values read from a file, aligned to the
/// exposure-trimmed rows by id.
fn weighting_from_file(ds: &Dataset, cfg: &TunerConfig, gps_path: &Path) -> Result<PseudoPopulation> {
    let trimmed = trim_by_exposure_quantiles(ds, cfg.exposure_trim_qtls)?;
    let all = GpsEstimate::read_csv(gps_path)?;
    let pos: std::collections::HashMap<_, _> = all.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let rows = trimmed
        .ids()
        .iter()
        .map(|id| {
            pos.get(id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: no GPS for id {id}", gps_path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let gps = all.select_rows(&rows);
    let mut pp = generate_weighted_pseudopop(&trimmed, &gps, &cfg.weight_cfg)?;
    pp.provenance.exposure_trim = Some(cfg.exposure_trim_qtls);
    Ok(pp)
}

fn run_pseudo_pop(a: &PseudoPopArgs, nthread: usize) -> Result<()> {
    let cfg = tuner_config(a, nthread)?;
    if a.gps_file.is_some() && cfg.ci_appr != Approach::Weighting {
        return Err(usage("gps-file", "only supported with --ci-appr weighting"));
    }
    let ds = a.data.load()?;
    create_dir(&a.out_dir)?;
    let (pp, report) = if let Some(gps_path) = &a.gps_file {
        let pp = weighting_from_file(&ds, &cfg, gps_path)?;
        let report = BalanceReport::for_pseudopop(&pp, cfg.covar_bl_trs, cfg.covar_bl_trs_type)?;
        log::info!(
            "weighting from {}: mean_ac={:.6} median_ac={:.6} max_ac={:.6} passed={}",
            gps_path.display(),
            report.adjusted.mean_ac,
            report.adjusted.median_ac,
            report.adjusted.max_ac,
            report.passed
        );
        write_json(&a.out_dir.join("result.json"), &report)?;
        (pp, report)
    } else {
        let result = generate_pseudo_pop(&ds, &cfg)?;
        let path = a.out_dir.join("attempts.jsonl");
        std::fs::write(&path, result.attempts_jsonl()).map_err(|e| Error::io(&path, e))?;
        write_json(&a.out_dir.join("result.json"), &result)?;
        (result.pseudo_pop, result.adjusted_corr_results)
    };
    pp.write_csv(&a.out_dir.join("pseudo_pop.csv"))?;
    report.write_csv(&a.out_dir.join("balance_report.csv"))?;
    Ok(())
}

fn run_balance(a: &BalanceArgs) -> Result<()> {
    let pp = a.data.load_pseudo_pop()?;
    let t: ThresholdType = parse_flag("covar-bl-trs-type", &a.covar_bl_trs_type)?;
    let report = BalanceReport::for_pseudopop(&pp, a.covar_bl_trs, t)?;
    report.write_csv(&a.out)?;
    println!("{}", serde_json::to_string(&report.adjusted)?);
    Ok(())
}

fn grid_values(flag: &str, s: &str) -> Result<(f64, f64, f64)> {
    let v = parse_floats(flag, s, 3)?;
    Ok((v[0], v[1], v[2]))
}

fn run_erf(a: &ErfArgs) -> Result<()> {
    let (s, e, st) = grid_values("bw-seq", &a.bw_seq)?;
    let grid = BandwidthGrid::new(s, e, st).map_err(|err| usage("bw-seq", err))?;
    let family: Family = parse_flag("family", &a.family)?;
    let pp = a.data.load_pseudo_pop()?;
    create_dir(&a.out_dir)?;
    let positive: Vec<f64> = (0..pp.len())
        .filter(|&i| pp.weights()[i] > 0.0)
        .map(|i| pp.data().exposure()[i])
        .collect();
    let (start, end, step) = match &a.w_vals {
        Some(w) => grid_values("w-vals", w)?,
        None => (quantile(&positive, 0.05)?, quantile(&positive, 0.95)?, 0.1),
    };
    if !(step > 0.0 && start <= end) {
        return Err(usage("w-vals", "need start <= end and step > 0"));
    }
    let w_vals: Vec<f64> = (0..)
        .map(|k| start + k as f64 * step)
        .take_while(|w| *w <= end + 1e-12)
        .collect();
    match a.method {
        ErfMethod::Pmetric => {
            let fit = estimate_pmetric_erf(&pp, family)?;
            log::info!("{:?} fit: intercept={} slope={}", fit.family, fit.intercept, fit.slope);
            write_json(&a.out_dir.join("pmetric.json"), &fit)?;
        }
        ErfMethod::Semipmetric => {
            estimate_semipmetric_erf(&pp, a.spline_df, &w_vals)?.write_csv(&a.out_dir.join("erf.csv"))?;
        }
        ErfMethod::Npmetric => {
            let est = if a.boot_b > 0 {
                let m = a.boot_m.unwrap_or((positive.len() as f64).powf(0.9).floor() as usize);
                let cfg = BootstrapConfig {
                    m,
                    replicates: a.boot_b,
                    alpha: a.alpha,
                    rng_seed: a.seed,
                };
                bootstrap_erf_ci(&pp, &grid, &w_vals, &cfg)?
            } else {
                estimate_npmetric_erf_pp(&pp, &grid, &w_vals)?
            };
            log::info!("optimal bandwidth {}", est.optimal_bw.unwrap_or(f64::NAN));
            est.write_csv(&a.out_dir.join("erf.csv"))?;
            est.write_risks_csv(&a.out_dir.join("risks.csv"))?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.nthread == 0 {
        return Err(usage("nthread", "must be >= 1"));
    }
    let level: LogLevel = parse_flag("log-level", &cli.log_level)?;
    configure_logging(&LogConfig {
        level,
        file_path: cli.log_file.clone(),
    })?;
    let nthread = cli.nthread;
    let result = match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::EstimateGps(a) => run_estimate_gps(a, nthread),
        Command::PseudoPop(a) => run_pseudo_pop(a, nthread),
        Command::BalanceReport(a) => with_threads(nthread, || run_balance(a)),
        Command::EstimateErf(a) => with_threads(nthread, || run_erf(a)),
        Command::PlotBalance(a) => {
            BalanceReport::read_csv(&a.input, a.threshold, ThresholdType::Maximal)
                .and_then(|r| emit_balance_plot(&r, a.threshold, &a.out))
        }
        Command::PlotErf(a) => ErfEstimate::read_csv(&a.input).and_then(|e| emit_erf_plot(&e, &a.out)),
    };
    log::logger().flush();
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            log::logger().flush();
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
