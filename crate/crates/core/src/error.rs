use std::path::PathBuf;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid quantile pair ({lo}, {hi}): require 0 <= lo < hi <= 1")]
    InvalidQuantiles { lo: f64, hi: f64 },

    #[error("trimming removed every row")]
    AllRowsTrimmed,

    #[error("singular design matrix")]
    SingularDesign,

    #[error("degenerate exposure: {0}")]
    DegenerateExposure(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty exposure grid: start {start} exceeds end {end}")]
    EmptyGrid { start: f64, end: f64 },

    #[error("degenerate standardizer: {0}")]
    DegenerateStandardizer(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("covariate `{0}` is not numeric")]
    NonNumericColumn(String),

    #[error("every tuning attempt failed: {0}")]
    AllAttemptsFailedConstruction(String),

    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("every bandwidth candidate produced a singular local fit")]
    AllBandwidthsDegenerate,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Parse { .. }
                | Error::DuplicateId(_)
                | Error::InvalidDataset(_)
                | Error::InvalidQuantiles { .. }
                | Error::InvalidArgument(_)
                | Error::NonNumericColumn(_)
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
