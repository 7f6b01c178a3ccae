//! Estimator identifiers and the per-replicate suite runner.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ccmar::{ccmar_direct, crossfit_ate, CcmarEstimates, CcmarOptions};
use super::comparators::{
    ate_ipw, ate_outcome_regression, complete_case_ate, fit_imputer, impute, or_terms, ps_terms, Adjustment, AdjustOptions,
    ArmMeans, ComparatorSpecs, Imputation, ModelVariant, Schema,
};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceSpecs;
use crate::record::CoarsenedRecord;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    CcmarIf,
    CcmarIwor,
    Comparator { adjustment: Adjustment, model: ModelVariant, imputation: Imputation },
}

impl EstimatorId {
    /// Both CCMAR estimators followed by every adjustment x model x imputation combination.
    pub fn full_suite() -> Vec<EstimatorId> {
        let mut out = vec![EstimatorId::CcmarIf, EstimatorId::CcmarIwor];
        for adjustment in [Adjustment::OutcomeRegression, Adjustment::Ipw] {
            for model in [ModelVariant::Plain, ModelVariant::Lasso] {
                for imputation in Imputation::ALL {
                    out.push(EstimatorId::Comparator { adjustment, model, imputation });
                }
            }
        }
        out
    }

    pub fn is_ccmar(self) -> bool {
        matches!(self, EstimatorId::CcmarIf | EstimatorId::CcmarIwor)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorId::CcmarIf => f.write_str("ccmar-if"),
            EstimatorId::CcmarIwor => f.write_str("ccmar-iwor"),
            EstimatorId::Comparator { adjustment, model, imputation } => {
                write!(f, "{}-{}-{}", adjustment.name(), model.name(), imputation.name())
            }
        }
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::config(format!("unknown estimator id `{s}`"));
        match s {
            "ccmar-if" => return Ok(EstimatorId::CcmarIf),
            "ccmar-iwor" => return Ok(EstimatorId::CcmarIwor),
            _ => {}
        }
        let mut parts = s.splitn(3, '-');
        let adjustment = match parts.next() {
            Some("or") => Adjustment::OutcomeRegression,
            Some("ipw") => Adjustment::Ipw,
            _ => return Err(unknown()),
        };
        let model = match parts.next() {
            Some("plain") => ModelVariant::Plain,
            Some("lasso") => ModelVariant::Lasso,
            _ => return Err(unknown()),
        };
        let imputation = parts.next().and_then(Imputation::from_name).ok_or_else(unknown)?;
        Ok(EstimatorId::Comparator { adjustment, model, imputation })
    }
}

impl Serialize for EstimatorId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EstimatorId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    pub nonconverged: bool,
    pub clipped: bool,
    /// Set at summary time by the extreme-result fence.
    pub extreme: bool,
    /// The estimator raised an error on this replicate; estimates are NaN.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: EstimatorId,
    pub chi1: f64,
    pub chi0: f64,
    pub ate: f64,
    pub flags: Flags,
}

impl EstimateRecord {
    pub fn new(estimator: EstimatorId, chi0: f64, chi1: f64, flags: Flags) -> Self {
        EstimateRecord { estimator, chi1, chi0, ate: chi1 - chi0, flags }
    }

    pub fn failed(estimator: EstimatorId) -> Self {
        EstimateRecord::new(estimator, f64::NAN, f64::NAN, Flags { failed: true, ..Flags::default() })
    }
}

/// Everything the suite needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpecs {
    pub ccmar: NuisanceSpecs,
    pub ccmar_options: CcmarOptions,
    /// Cross-fit the CCMAR estimators with this many folds; `None` fits and evaluates on all rows.
    pub crossfit_folds: Option<usize>,
    pub comparators: ComparatorSpecs,
}

/// Turns data-dependent failures into a flagged record; configuration errors propagate.
fn settle<T>(r: Result<T>, on_err: impl FnOnce(&Error)) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_config() => Err(e),
        Err(e) => {
            on_err(&e);
            Ok(None)
        }
    }
}

/// Runs every estimator in `suite` on one dataset. CCMAR estimators share one
/// nuisance fit; comparators share the imputed datasets of their variant.
pub fn run_estimator_suite(data: &[CoarsenedRecord], suite: &[EstimatorId], specs: &SuiteSpecs, seed: u64) -> Result<Vec<EstimateRecord>> {
    if suite.is_empty() {
        return Err(Error::config("estimator suite is empty"));
    }

    let mut ccmar: Option<Option<CcmarEstimates>> = None;
    if suite.iter().any(|id| id.is_ccmar()) {
        let opts = CcmarOptions { iwor_only: !suite.contains(&EstimatorId::CcmarIf), ..specs.ccmar_options };
        let r = match specs.crossfit_folds {
            Some(k) => crossfit_ate(data, &specs.ccmar, k, rng::derive_key(seed, 2), &opts),
            None => ccmar_direct(data, &specs.ccmar, &opts),
        };
        ccmar = Some(settle(r, warn("ccmar"))?);
    }

    let schema = Schema::of(data);
    let mut imputed: BTreeMap<Imputation, Option<Vec<Vec<CoarsenedRecord>>>> = BTreeMap::new();
    let mut imputer_nonconverged: BTreeMap<Imputation, bool> = BTreeMap::new();
    let mut adjusted: BTreeMap<EstimatorId, Option<ArmMeans>> = BTreeMap::new();

    let mut out = Vec::with_capacity(suite.len());
    for &id in suite {
        let rec = match id {
            EstimatorId::CcmarIf | EstimatorId::CcmarIwor => match ccmar.flatten() {
                Some(e) => {
                    let chi = if id == EstimatorId::CcmarIf { e.chi_if } else { e.chi_iwor };
                    let flags = Flags { nonconverged: e.nonconverged, clipped: e.clipped > 0, ..Flags::default() };
                    EstimateRecord::new(id, chi[0], chi[1], flags)
                }
                None => EstimateRecord::failed(id),
            },
            EstimatorId::Comparator { adjustment, model, imputation } => {
                if !adjusted.contains_key(&id) {
                    let opts = AdjustOptions {
                        variant: model,
                        lasso_folds: specs.comparators.lasso_folds,
                        seed: rng::derive_key(seed, 0x300 + comparator_code(adjustment, model, imputation)),
                        ps_clip: specs.comparators.ps_clip,
                    };
                    let r = if imputation == Imputation::CompleteCase {
                        complete_case_ate(data, adjustment, &opts)
                    } else {
                        if !imputed.contains_key(&imputation) {
                            let code = imputation as u64;
                            let fitted = settle(
                                fit_imputer(data, imputation, &specs.comparators, rng::derive_key(seed, 0x200 + code)),
                                warn("imputation"),
                            )?;
                            let sets = match fitted {
                                Some(imp) => {
                                    imputer_nonconverged.insert(imputation, imp.nonconverged());
                                    let mut r = rng::stream(seed, 0, rng::Stage::Impute(code as u32));
                                    settle(impute(data, &imp, specs.comparators.imputations, &mut r), warn("imputation"))?
                                }
                                None => None,
                            };
                            imputed.insert(imputation, sets);
                        }
                        match &imputed[&imputation] {
                            Some(sets) => match adjustment {
                                Adjustment::OutcomeRegression => ate_outcome_regression(sets, &or_terms(schema, model), &opts),
                                Adjustment::Ipw => ate_ipw(sets, &ps_terms(schema, model), &opts),
                            },
                            None => Err(Error::domain("imputation failed")),
                        }
                    };
                    let v = settle(r, warn("comparator"))?;
                    adjusted.insert(id, v);
                }
                match adjusted[&id] {
                    Some(m) => {
                        let imp_nc = imputer_nonconverged.get(&imputation).copied().unwrap_or(false);
                        let flags = Flags { nonconverged: m.nonconverged || imp_nc, clipped: m.clipped, ..Flags::default() };
                        EstimateRecord::new(id, m.chi[0], m.chi[1], flags)
                    }
                    None => EstimateRecord::failed(id),
                }
            }
        };
        out.push(rec);
    }
    Ok(out)
}

fn warn(what: &'static str) -> impl FnOnce(&Error) {
    move |e| log::debug!("{what} failed: {e}")
}

fn comparator_code(adjustment: Adjustment, model: ModelVariant, imputation: Imputation) -> u64 {
    (adjustment as u64) * 16 + (model as u64) * 4 + imputation as u64
}
