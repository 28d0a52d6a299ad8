//! Differentially private SGD with noise scales adapted to the stepsize.
//!
//! The crate provides:
//! - [`accountant`]: Gaussian-mechanism calibration, subsampling
//!   amplification, and (extended) advanced composition;
//! - [`schedules`]: stepsize-denominator and noise-scale update rules and
//!   the M functionals they induce in the utility bounds;
//! - [`models`]: desk-scale objectives with closed-form gradients, clipping,
//!   and smoothness probing;
//! - [`optimizer`]: the DP-SGD/ADP-SGD iteration itself;
//! - [`bounds`]: closed-form utility-bound evaluators;
//! - [`harness`]: synthetic data, configs, seed-parallel comparisons, and
//!   report emission.

pub mod accountant;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod optimizer;
pub mod rng;
pub mod schedules;

pub use accountant::{AccountantParams, CompositionResult, PerStepPrivacy, PrivacyBudget};
pub use error::{Error, Result};
pub use harness::{ComparisonReport, ExperimentConfig};
pub use models::{Dataset, ModelSpec};
pub use optimizer::{OptimizerConfig, RunLog};
pub use schedules::{NoiseScaleSchedule, StepsizeSchedule};
