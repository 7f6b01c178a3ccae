//! Average treatment effect estimation when some confounders are missing for
//! part of the sample.
//!
//! The estimators assume the complete cases are missing at random given the
//! always-observed confounders, treatment and outcome (CCMAR). Two estimators
//! are provided: a one-step influence-function estimator and an inverse-weighted
//! outcome-regression estimator. Imputation-based comparators and a seeded
//! simulation harness sit alongside them.

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod model_fit;
pub mod nuisance;
pub mod record;
pub mod report;
pub mod rng;
pub mod scenario_file;

pub use error::{Error, Result};
pub use record::{CoarsenedRecord, CompleteConfounders, PartialConfounders, Point, Var};
