//! WebAssembly bindings for a single-page demo: estimate on one simulated
//! dataset, compare IF and IWOR sampling distributions, and validate a
//! scenario file. Every binding returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ccmar::estimators::{run_estimator_suite, EstimateRecord, EstimatorId};
use ccmar::harness::{mark_extremes, run_scenario, summarize, ScenarioConfig, TruthMode, DEFAULT_FENCE};
use ccmar::report::{emit_histogram_data, parse_histogram};
use ccmar::scenario_file::{parse_scenario_str, to_toml};
use ccmar::{Error, Result};

/// Scenario files bundled into the module, by name.
pub const SHIPPED: [(&str, &str); 5] = [
    ("scenario1", include_str!("../../core/scenarios/scenario1.toml")),
    ("scenario2", include_str!("../../core/scenarios/scenario2.toml")),
    ("scenario3", include_str!("../../core/scenarios/scenario3.toml")),
    ("scenario4", include_str!("../../core/scenarios/scenario4.toml")),
    ("np", include_str!("../../core/scenarios/np.toml")),
];

/// Largest sample size and replicate count the page accepts; the browser runs single-threaded.
const MAX_N: usize = 20_000;
const MAX_REPS: usize = 200;

/// A bundled scenario by name, or the argument itself parsed as TOML.
fn load(scenario: &str) -> Result<ScenarioConfig> {
    let text = SHIPPED.iter().find(|(k, _)| *k == scenario).map_or(scenario, |(_, v)| v);
    let mut c = parse_scenario_str(text)?;
    c.workers = 1;
    Ok(c)
}

fn check_size(n: usize, reps: usize) -> Result<()> {
    if !(50..=MAX_N).contains(&n) {
        return Err(Error::config(format!("n must lie in [50, {MAX_N}]")));
    }
    if !(1..=MAX_REPS).contains(&reps) {
        return Err(Error::config(format!("replicates must lie in [1, {MAX_REPS}]")));
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

#[derive(Serialize)]
struct EstimateReport {
    scenario: String,
    n: usize,
    complete_cases: usize,
    treated: usize,
    estimates: Vec<EstimateRecord>,
}

/// CCMAR and complete-case estimates on one simulated dataset.
pub fn estimate_json(scenario: &str, n: usize, seed: u64) -> Result<String> {
    check_size(n, 1)?;
    let c = load(scenario)?;
    let data = ccmar::dgp::generate(&c.coefficients, &c.lc, n, &mut ccmar::rng::from_key(seed))?;
    let suite: Vec<EstimatorId> = ["ccmar-if", "ccmar-iwor", "or-plain-cc", "ipw-plain-cc"]
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let estimates = run_estimator_suite(&data, &suite, &c.specs, seed)?;
    to_json(&EstimateReport {
        scenario: c.name,
        n,
        complete_cases: data.iter().filter(|r| r.s).count(),
        treated: data.iter().filter(|r| r.a == 1).count(),
        estimates,
    })
}

#[derive(Serialize)]
struct Distribution {
    estimator: EstimatorId,
    mean: f64,
    se: f64,
    median: f64,
    skewness: f64,
    kept: usize,
    /// `(bin_center, count)` pairs.
    histogram: Vec<(f64, usize)>,
}

fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    if m2 > 0.0 {
        m3 / m2.powf(1.5)
    } else {
        0.0
    }
}

/// Sampling distributions of the IF and IWOR estimators over `reps` replicates.
pub fn distributions_json(scenario: &str, n: usize, reps: usize, seed: u64, bins: usize) -> Result<String> {
    check_size(n, reps)?;
    let mut c = load(scenario)?;
    c.n = n;
    c.replicates = reps;
    c.master_seed = seed;
    c.suite = vec![EstimatorId::CcmarIf, EstimatorId::CcmarIwor];
    c.truth = TruthMode::Fixed { value: 0.0 };
    let mut res = run_scenario(&c)?;
    mark_extremes(&mut res, DEFAULT_FENCE);
    let rows = summarize(&res, 0.0, EstimatorId::CcmarIf, DEFAULT_FENCE)?;
    let mut out = Vec::new();
    for r in rows {
        let kept: Vec<f64> = res
            .iter()
            .flat_map(|x| &x.records)
            .filter(|e| e.estimator == r.estimator && !e.flags.failed && !e.flags.extreme && e.ate.is_finite())
            .map(|e| e.ate)
            .collect();
        out.push(Distribution {
            estimator: r.estimator,
            mean: r.mean_ate,
            se: r.se,
            median: r.median_ate,
            skewness: skewness(&kept),
            kept: r.kept,
            histogram: parse_histogram(&emit_histogram_data(&res, r.estimator, bins)?)?,
        });
    }
    to_json(&out)
}

#[derive(Serialize)]
struct Validation {
    ok: bool,
    message: String,
    /// The fully defaulted scenario when valid.
    canonical: Option<String>,
}

/// Parses and validates scenario TOML. Never fails; problems are reported in the result.
pub fn validate_json(text: &str) -> String {
    let v = match parse_scenario_str(text).and_then(|c| c.validate().and_then(|()| to_toml(&c)).map(|t| (c, t))) {
        Ok((c, t)) => Validation { ok: true, message: format!("{}: {} estimators, n = {}", c.name, c.suite.len(), c.n), canonical: Some(t) },
        Err(e) => Validation { ok: false, message: e.to_string(), canonical: None },
    };
    serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"ok\":false,\"message\":\"{e}\"}}"))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Names of the bundled scenarios.
#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names() -> Vec<String> {
    SHIPPED.iter().map(|(k, _)| (*k).to_string()).collect()
}

/// Text of a bundled scenario.
#[wasm_bindgen(js_name = scenarioText)]
pub fn scenario_text(name: &str) -> std::result::Result<String, JsError> {
    SHIPPED.iter().find(|(k, _)| *k == name).map(|(_, v)| (*v).to_string()).ok_or_else(|| JsError::new("unknown scenario"))
}

#[wasm_bindgen]
pub fn estimate(scenario: &str, n: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(estimate_json(scenario, n as usize, u64::from(seed)))
}

#[wasm_bindgen]
pub fn distributions(scenario: &str, n: u32, reps: u32, seed: u32, bins: u32) -> std::result::Result<String, JsError> {
    js(distributions_json(scenario, n as usize, reps as usize, u64::from(seed), bins as usize))
}

#[wasm_bindgen]
pub fn validate(text: &str) -> String {
    validate_json(text)
}
