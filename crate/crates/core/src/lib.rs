//! Causal inference for continuous exposures via generalized propensity
//! scores (GPS).
//!
//! The crate covers the full design/analysis workflow:
//!
//! 1. [`gps`] estimates the conditional density of the exposure given
//!    covariates, under a normal or a kernel specification, using the
//!    regression learners in [`learners`].
//! 2. [`matching`] and [`weighting`] turn GPS values into a pseudo-population.
//! 3. [`balance`] measures covariate balance via weighted absolute
//!    correlations, and [`tuner`] searches hyperparameters and covariate
//!    transforms until balance is acceptable.
//! 4. [`erf`] fits parametric, spline, and local-linear exposure-response
//!    curves on the pseudo-population.
//!
//! [`simulate`] provides a confounded data generator with a known
//! exposure-response function.

pub mod balance;
pub mod dataset;
pub mod erf;
pub mod error;
pub mod gps;
pub mod learners;
pub mod logging;
pub mod matching;
mod parallel;
pub mod plot;
pub mod pseudo_pop;
pub mod simulate;
pub mod stats;
pub mod tuner;
pub mod weighting;

pub use error::{Error, Result};
pub use parallel::with_threads;
