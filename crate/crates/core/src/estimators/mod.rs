//! Treatment-effect estimators: the two CCMAR estimators and the
//! imputation-based comparator pipelines.

pub mod ccmar;
pub mod comparators;
pub mod suite;

pub use ccmar::{ccmar_estimates, chi_if, chi_iwor, crossfit_ate, CcmarEstimates, CcmarOptions};
pub use comparators::{
    ate_ipw, ate_outcome_regression, complete_case_ate, fit_imputer, impute, Adjustment, AdjustOptions, ArmMeans,
    ComparatorSpecs, ImputeSpec, Imputation, Imputer, ModelVariant,
};
pub use suite::{run_estimator_suite, EstimateRecord, EstimatorId, Flags, SuiteSpecs};
