//! Scenario documents: TOML (primary) or JSON, one section per concern.
//!
//! ```toml
//! [meta]
//! version = 1
//! name = "example"
//!
//! [factorization]
//! kind = "levis"
//!
//! [coefficients.eta]
//! "(Intercept)" = -0.624
//! L1 = 0.308
//!
//! [coefficients.mu]
//! "(Intercept)" = -0.207
//! A = 0.045
//! sigma = 0.109
//! ```
//!
//! Coefficient tables map term names to values; an absent term is simply
//! omitted. Reserved keys inside a coefficient table are `family`, `sigma`,
//! `alpha`, `control` and `treated`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dgp::{Factorization, LcGenerator, OutcomeSpec, ScenarioCoefficients};
use crate::error::{Error, Result};
use crate::estimators::{CcmarOptions, ComparatorSpecs, EstimatorId, ImputeSpec, SuiteSpecs};
use crate::harness::{ScenarioConfig, TruthMode, DEFAULT_FENCE};
use crate::model_fit::{BetaLaw, FittedGlm, GlmFamily, TermSpec};
use crate::nuisance::{ClipPolicy, IntegrationSettings, NuisanceSpecs};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    meta: RawMeta,
    factorization: RawFactorization,
    coefficients: Table,
    #[serde(default)]
    lc: LcGenerator,
    run: RawRun,
    suite: RawSuite,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ccmar: Option<NuisanceSpecs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    imputation: Option<ImputeSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    version: u32,
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFactorization {
    kind: Factorization,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    n: usize,
    replicates: usize,
    seed: u64,
    #[serde(default = "one")]
    workers: usize,
    #[serde(default = "default_fence")]
    fence: f64,
    truth: TruthMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crossfit_folds: Option<usize>,
    #[serde(default = "one")]
    imputations: usize,
    #[serde(default = "five")]
    lasso_folds: usize,
    /// Clipping of the complete-case probability in the CCMAR estimators.
    #[serde(default)]
    clip: ClipPolicy,
    /// Clipping of comparator propensity scores.
    #[serde(default)]
    ps_clip: ClipPolicy,
    #[serde(default)]
    integration: IntegrationSettings,
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn default_fence() -> f64 {
    DEFAULT_FENCE
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSuite {
    /// Estimator ids, or the single entry `"all"`.
    estimators: Vec<String>,
}

const RESERVED: [&str; 5] = ["family", "sigma", "alpha", "control", "treated"];

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse { location: location.into(), message: message.into() }
}

fn number(v: &Value, at: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(parse_err(at, "expected a number")),
    }
}

fn shape_pair(v: Option<&Value>, at: &str) -> Result<BetaLaw> {
    let arr = v.and_then(Value::as_array).ok_or_else(|| parse_err(at, "expected [shape1, shape2]"))?;
    if arr.len() != 2 {
        return Err(parse_err(at, "expected [shape1, shape2]"));
    }
    BetaLaw::new(number(&arr[0], at)?, number(&arr[1], at)?).map_err(|e| parse_err(at, e.to_string()))
}

/// Reads one `[coefficients.<model>]` table into a fixed-coefficient GLM.
fn read_glm(model: &str, t: &Table, default_family: Option<GlmFamily>) -> Result<FittedGlm> {
    let at = |k: &str| format!("coefficients.{model}.{k}");
    let family = match t.get("family") {
        Some(Value::String(s)) => s.parse::<GlmFamily>().map_err(|e| parse_err(at("family"), e.to_string()))?,
        Some(_) => return Err(parse_err(at("family"), "expected a string")),
        None => default_family.ok_or_else(|| parse_err(format!("coefficients.{model}"), "missing `family`"))?,
    };
    let mut terms = Vec::new();
    let mut coefs = Vec::new();
    for (k, v) in t {
        if RESERVED.contains(&k.as_str()) {
            continue;
        }
        let term: TermSpec = k.parse().map_err(|e: Error| parse_err(at(k), e.to_string()))?;
        terms.push(term);
        coefs.push(number(v, &at(k))?);
    }
    let dispersion = match family {
        GlmFamily::Gaussian => Some(number(t.get("sigma").ok_or_else(|| parse_err(at("sigma"), "gaussian model needs `sigma`"))?, &at("sigma"))?),
        GlmFamily::Gamma => Some(number(t.get("alpha").ok_or_else(|| parse_err(at("alpha"), "gamma model needs `alpha`"))?, &at("alpha"))?),
        GlmFamily::Bernoulli => None,
    };
    for k in ["sigma", "alpha", "control", "treated"] {
        let used = (k == "sigma" && family == GlmFamily::Gaussian) || (k == "alpha" && family == GlmFamily::Gamma);
        if t.contains_key(k) && !used {
            return Err(parse_err(at(k), format!("not valid for a {family} model")));
        }
    }
    FittedGlm::fixed(family, terms, coefs, dispersion).map_err(|e| parse_err(format!("coefficients.{model}"), e.to_string()))
}

fn write_glm(m: &FittedGlm, with_family: bool) -> Table {
    let mut t = Table::new();
    if with_family {
        t.insert("family".into(), Value::String(m.family.to_string()));
    }
    for (term, c) in m.terms.iter().zip(&m.coefficients) {
        t.insert(term.to_string(), Value::Float(*c));
    }
    match (m.family, m.dispersion) {
        (GlmFamily::Gaussian, Some(d)) => {
            t.insert("sigma".into(), Value::Float(d));
        }
        (GlmFamily::Gamma, Some(d)) => {
            t.insert("alpha".into(), Value::Float(d));
        }
        _ => {}
    }
    t
}

fn read_coefficients(kind: Factorization, tables: &Table) -> Result<ScenarioCoefficients> {
    for k in tables.keys() {
        if !["eta", "mu", "pi", "lambda1", "lambda2"].contains(&k.as_str()) {
            return Err(parse_err(format!("coefficients.{k}"), "unknown model"));
        }
    }
    let table = |m: &str| -> Result<Option<&Table>> {
        match tables.get(m) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(t)),
            Some(_) => Err(parse_err(format!("coefficients.{m}"), "expected a table")),
        }
    };
    let required = |m: &str| table(m)?.ok_or_else(|| parse_err("coefficients", format!("missing required model `{m}`")));

    let eta = read_glm("eta", required("eta")?, Some(GlmFamily::Bernoulli))?;
    let mu_t = required("mu")?;
    let mu = if mu_t.get("family").and_then(Value::as_str) == Some("beta-per-arm") {
        for k in mu_t.keys() {
            if !["family", "control", "treated"].contains(&k.as_str()) {
                return Err(parse_err(format!("coefficients.mu.{k}"), "beta-per-arm outcome takes only `control` and `treated`"));
            }
        }
        OutcomeSpec::BetaPerArm([
            shape_pair(mu_t.get("control"), "coefficients.mu.control")?,
            shape_pair(mu_t.get("treated"), "coefficients.mu.treated")?,
        ])
    } else {
        OutcomeSpec::Gaussian(read_glm("mu", mu_t, Some(GlmFamily::Gaussian))?)
    };
    let coef = ScenarioCoefficients {
        factorization: kind,
        eta,
        mu,
        pi: read_glm("pi", required("pi")?, Some(GlmFamily::Bernoulli))?,
        lambda1: read_glm("lambda1", required("lambda1")?, None)?,
        lambda2: table("lambda2")?.map(|t| read_glm("lambda2", t, None)).transpose()?,
    };
    coef.validate().map_err(|e| match e {
        Error::ConditioningSet { model, var } => {
            parse_err(format!("coefficients.{model}"), format!("conditioning-set violation: `{model}` may not depend on {var}"))
        }
        other => parse_err("coefficients", other.to_string()),
    })?;
    Ok(coef)
}

fn write_coefficients(c: &ScenarioCoefficients) -> Table {
    let mut t = Table::new();
    t.insert("eta".into(), Value::Table(write_glm(&c.eta, false)));
    let mu = match &c.mu {
        OutcomeSpec::Gaussian(m) => write_glm(m, false),
        OutcomeSpec::BetaPerArm(l) => {
            let mut m = Table::new();
            m.insert("family".into(), Value::String("beta-per-arm".into()));
            for (k, law) in [("control", l[0]), ("treated", l[1])] {
                m.insert(k.into(), Value::Array(vec![Value::Float(law.shape1), Value::Float(law.shape2)]));
            }
            m
        }
    };
    t.insert("mu".into(), Value::Table(mu));
    t.insert("pi".into(), Value::Table(write_glm(&c.pi, false)));
    t.insert("lambda1".into(), Value::Table(write_glm(&c.lambda1, true)));
    if let Some(l2) = &c.lambda2 {
        t.insert("lambda2".into(), Value::Table(write_glm(l2, true)));
    }
    t
}

fn parse_suite(raw: &RawSuite) -> Result<Vec<EstimatorId>> {
    if raw.estimators.len() == 1 && raw.estimators[0] == "all" {
        return Ok(EstimatorId::full_suite());
    }
    let mut out = Vec::new();
    for (i, s) in raw.estimators.iter().enumerate() {
        let id: EstimatorId = s.parse().map_err(|e: Error| parse_err(format!("suite.estimators[{i}]"), e.to_string()))?;
        if out.contains(&id) {
            return Err(parse_err(format!("suite.estimators[{i}]"), format!("duplicate estimator `{s}`")));
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(parse_err("suite.estimators", "no estimators listed"));
    }
    Ok(out)
}

fn build(raw: RawScenario) -> Result<ScenarioConfig> {
    if raw.meta.version != FORMAT_VERSION {
        return Err(parse_err("meta.version", format!("unsupported version {} (expected {FORMAT_VERSION})", raw.meta.version)));
    }
    let coefficients = read_coefficients(raw.factorization.kind, &raw.coefficients)?;
    let ccmar = match raw.ccmar {
        Some(s) => s,
        None => coefficients.true_specs().map_err(|e| parse_err("ccmar", e.to_string()))?,
    };
    ccmar.validate().map_err(|e| parse_err("ccmar", e.to_string()))?;
    let true_dgp = raw.imputation.unwrap_or_else(|| ImputeSpec { l4: ccmar.lambda1.clone(), l5: ccmar.lambda2.clone() });
    if true_dgp.l5.is_some() != ccmar.lambda2.is_some() {
        return Err(parse_err("imputation", "imputation and CCMAR specs disagree on the number of partial confounders"));
    }
    let run = raw.run;
    if let Some(k) = run.crossfit_folds {
        if k < 2 {
            return Err(parse_err("run.crossfit_folds", "cross-fitting needs at least 2 folds"));
        }
    }
    if run.imputations < 1 || run.lasso_folds < 2 || run.workers < 1 {
        return Err(parse_err("run", "imputations and workers must be >= 1 and lasso_folds >= 2"));
    }
    let config = ScenarioConfig {
        name: raw.meta.name,
        description: raw.meta.description,
        coefficients,
        lc: raw.lc,
        n: run.n,
        replicates: run.replicates,
        suite: parse_suite(&raw.suite)?,
        specs: SuiteSpecs {
            ccmar,
            ccmar_options: CcmarOptions { clip: run.clip, settings: run.integration, iwor_only: false },
            crossfit_folds: run.crossfit_folds,
            comparators: ComparatorSpecs {
                true_dgp,
                imputations: run.imputations,
                ps_clip: run.ps_clip,
                lasso_folds: run.lasso_folds,
            },
        },
        master_seed: run.seed,
        truth: run.truth,
        workers: run.workers,
        fence: run.fence,
    };
    config.validate().map_err(|e| parse_err("run", e.to_string()))?;
    Ok(config)
}

fn unbuild(c: &ScenarioConfig) -> RawScenario {
    let full = c.suite == EstimatorId::full_suite();
    RawScenario {
        meta: RawMeta { version: FORMAT_VERSION, name: c.name.clone(), description: c.description.clone() },
        factorization: RawFactorization { kind: c.coefficients.factorization },
        coefficients: write_coefficients(&c.coefficients),
        lc: c.lc,
        run: RawRun {
            n: c.n,
            replicates: c.replicates,
            seed: c.master_seed,
            workers: c.workers,
            fence: c.fence,
            truth: c.truth,
            crossfit_folds: c.specs.crossfit_folds,
            imputations: c.specs.comparators.imputations,
            lasso_folds: c.specs.comparators.lasso_folds,
            clip: c.specs.ccmar_options.clip,
            ps_clip: c.specs.comparators.ps_clip,
            integration: c.specs.ccmar_options.settings,
        },
        suite: RawSuite {
            estimators: if full { vec!["all".into()] } else { c.suite.iter().map(ToString::to_string).collect() },
        },
        ccmar: Some(c.specs.ccmar.clone()),
        imputation: Some(c.specs.comparators.true_dgp.clone()),
    }
}

/// Parses a TOML scenario document.
pub fn parse_scenario_str(text: &str) -> Result<ScenarioConfig> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let location = e.span().map_or_else(|| "document".to_string(), |s| format!("line {}", line_of(text, s.start)));
        parse_err(location, e.message().to_string())
    })?;
    build(raw)
}

/// Parses a JSON scenario document with the same layout.
pub fn parse_scenario_json(text: &str) -> Result<ScenarioConfig> {
    let raw: RawScenario =
        serde_json::from_str(text).map_err(|e| parse_err(format!("line {}", e.line()), e.to_string()))?;
    build(raw)
}

/// Reads a scenario file; `.json` files use the JSON loader, anything else TOML.
pub fn parse_scenario_file(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_scenario_json(&text)
    } else {
        parse_scenario_str(&text)
    };
    parsed.map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{}: {location}", path.display()), message },
        other => other,
    })
}

/// Serializes a config to TOML with every default written out.
pub fn to_toml(config: &ScenarioConfig) -> Result<String> {
    toml::to_string(&unbuild(config)).map_err(|e| Error::config(format!("cannot serialize scenario: {e}")))
}

pub fn to_json(config: &ScenarioConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(&unbuild(config))?)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}
