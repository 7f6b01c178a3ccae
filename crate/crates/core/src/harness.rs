//! Replicate driver, metric aggregation and the extreme-result fence.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::dgp::{generate, true_ate, LcGenerator, ScenarioCoefficients};
use crate::error::{Error, Result};
use crate::estimators::{run_estimator_suite, EstimateRecord, EstimatorId, SuiteSpecs};
use crate::rng::{self, Stage};

/// Default multiplier of the interquartile range in the extreme-result fence.
pub const DEFAULT_FENCE: f64 = 10.0;

/// How the scenario's ground truth is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TruthMode {
    Analytic,
    MonteCarlo { n_mc: usize, repeats: usize },
    /// A value computed beforehand.
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub description: String,
    pub coefficients: ScenarioCoefficients,
    pub lc: LcGenerator,
    pub n: usize,
    pub replicates: usize,
    pub suite: Vec<EstimatorId>,
    pub specs: SuiteSpecs,
    pub master_seed: u64,
    pub truth: TruthMode,
    pub workers: usize,
    pub fence: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::config("replicates must be at least 1"));
        }
        if self.n < 50 {
            return Err(Error::config(format!("sample size must be at least 50, got {}", self.n)));
        }
        if self.suite.is_empty() {
            return Err(Error::config("estimator suite is empty"));
        }
        if !(self.fence > 0.0) {
            return Err(Error::config("fence multiplier must be positive"));
        }
        self.coefficients.validate()?;
        self.lc.validate()?;
        self.specs.ccmar.validate()
    }

    /// Ground truth per the configured mode: `(value, mc_se)`.
    pub fn compute_truth(&self) -> Result<(f64, f64)> {
        match self.truth {
            TruthMode::Analytic => true_ate(&self.coefficients, &self.lc, 0, 0, self.master_seed),
            TruthMode::MonteCarlo { n_mc, repeats } => true_ate(&self.coefficients, &self.lc, n_mc, repeats, self.master_seed),
            TruthMode::Fixed { value } => Ok((value, 0.0)),
        }
    }
}

/// All estimator records of one replicate, in suite order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub records: Vec<EstimateRecord>,
}

/// Per-replicate seed for everything after data generation.
pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    rng::derive_key(master, replicate as u64)
}

/// Generates and analyzes one replicate. Panics become failed records.
pub fn run_replicate(config: &ScenarioConfig, r: usize) -> Result<ReplicateResult> {
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let mut g = rng::stream(config.master_seed, r as u64, Stage::Data);
        let data = generate(&config.coefficients, &config.lc, config.n, &mut g)?;
        run_estimator_suite(&data, &config.suite, &config.specs, replicate_seed(config.master_seed, r))
    }));
    let records = match outcome {
        Ok(Ok(recs)) => recs,
        Ok(Err(e)) if e.is_config() => return Err(e),
        Ok(Err(e)) => {
            log::warn!("replicate {r} failed: {e}");
            config.suite.iter().map(|&id| EstimateRecord::failed(id)).collect()
        }
        Err(_) => {
            log::warn!("replicate {r} panicked");
            config.suite.iter().map(|&id| EstimateRecord::failed(id)).collect()
        }
    };
    Ok(ReplicateResult { replicate: r, records })
}

/// Runs every replicate on `config.workers` threads. Results are ordered by
/// replicate index and do not depend on the worker count.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Vec<ReplicateResult>> {
    config.validate()?;
    let done = AtomicUsize::new(0);
    let step = (config.replicates / 10).max(1);
    let one = |r: usize| {
        let res = run_replicate(config, r);
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        if k % step == 0 || k == config.replicates {
            log::info!("{}: {k}/{} replicates done", config.name, config.replicates);
        }
        res
    };
    let out = run_all(config.replicates, config.workers, one)?;
    let flags = flag_report(&out);
    log::info!(
        "{}: nonconverged={} clipped={} failed={}",
        config.name,
        flags.nonconverged,
        flags.clipped,
        flags.failed
    );
    Ok(out)
}

#[cfg(feature = "parallel")]
fn run_all(n: usize, workers: usize, f: impl Fn(usize) -> Result<ReplicateResult> + Sync + Send) -> Result<Vec<ReplicateResult>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_all(n: usize, _workers: usize, f: impl Fn(usize) -> Result<ReplicateResult>) -> Result<Vec<ReplicateResult>> {
    (0..n).map(f).collect()
}

/// Per-estimator summary across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorId,
    /// `100 (mean - truth) / truth`, or `mean - truth` when `absolute_bias`.
    pub pct_bias: f64,
    /// As `pct_bias` with the median.
    pub pct_m_bias: f64,
    /// Sample SD of the kept estimates.
    pub se: f64,
    /// `se / se(reference)`; absent without a usable reference.
    pub relative_uncertainty: Option<f64>,
    /// Replicates removed by the extreme-result fence.
    pub dropped: usize,
    /// Replicates where the estimator failed.
    pub failed: usize,
    pub kept: usize,
    pub mean_ate: f64,
    pub median_ate: f64,
    /// True when the truth is near zero and biases are absolute.
    pub absolute_bias: bool,
}

impl MetricsRow {
    /// Monte Carlo standard error of the mean estimate.
    pub fn mc_se(&self) -> f64 {
        self.se / (self.kept as f64).sqrt()
    }

    /// Monte Carlo standard error of `pct_bias`.
    pub fn pct_bias_mc_se(&self, truth: f64) -> f64 {
        if self.absolute_bias {
            self.mc_se()
        } else {
            100.0 * self.mc_se() / truth.abs()
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `(lower, upper)` of `median +- fence * IQR` over the finite values.
pub fn fence_bounds(values: &[f64], fence: f64) -> Option<(f64, f64)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let s = sorted(&finite);
    let med = quantile(&s, 0.5);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    Some((med - fence * iqr, med + fence * iqr))
}

fn estimates_of(results: &[ReplicateResult], id: EstimatorId) -> Vec<&EstimateRecord> {
    results.iter().filter_map(|r| r.records.iter().find(|e| e.estimator == id)).collect()
}

/// Sets the `extreme` flag on every record outside its estimator's fence.
pub fn mark_extremes(results: &mut [ReplicateResult], fence: f64) {
    let mut ids: Vec<EstimatorId> = Vec::new();
    for r in results.iter() {
        for e in &r.records {
            if !ids.contains(&e.estimator) {
                ids.push(e.estimator);
            }
        }
    }
    for id in ids {
        let values: Vec<f64> = estimates_of(results, id).iter().filter(|e| !e.flags.failed).map(|e| e.ate).collect();
        let Some((lo, hi)) = fence_bounds(&values, fence) else { continue };
        for r in results.iter_mut() {
            for e in r.records.iter_mut().filter(|e| e.estimator == id && !e.flags.failed) {
                e.flags.extreme = !(e.ate >= lo && e.ate <= hi);
            }
        }
    }
}

fn bias(value: f64, truth: f64) -> (f64, bool) {
    if truth.abs() < 1e-8 {
        (value - truth, true)
    } else {
        (100.0 * (value - truth) / truth, false)
    }
}

/// Metrics per estimator in first-appearance order. The fence is recomputed
/// here, so the result does not depend on prior [`mark_extremes`] calls.
pub fn summarize(results: &[ReplicateResult], truth: f64, reference: EstimatorId, fence: f64) -> Result<Vec<MetricsRow>> {
    if !truth.is_finite() {
        return Err(Error::domain("truth must be finite"));
    }
    let mut ids: Vec<EstimatorId> = Vec::new();
    for r in results {
        for e in &r.records {
            if !ids.contains(&e.estimator) {
                ids.push(e.estimator);
            }
        }
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let recs = estimates_of(results, id);
        let usable: Vec<f64> = recs.iter().filter(|e| !e.flags.failed && e.ate.is_finite()).map(|e| e.ate).collect();
        let failed = recs.len() - usable.len();
        let (lo, hi) = fence_bounds(&usable, fence).ok_or_else(|| Error::domain(format!("no usable replicates for {id}")))?;
        let kept: Vec<f64> = usable.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
        if kept.is_empty() {
            return Err(Error::domain(format!("no replicates kept for {id}")));
        }
        let k = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / k;
        let median = quantile(&sorted(&kept), 0.5);
        let se = if kept.len() > 1 { (kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
        let (pct_bias, absolute_bias) = bias(mean, truth);
        let (pct_m_bias, _) = bias(median, truth);
        rows.push(MetricsRow {
            estimator: id,
            pct_bias,
            pct_m_bias,
            se,
            relative_uncertainty: None,
            dropped: usable.len() - kept.len(),
            failed,
            kept: kept.len(),
            mean_ate: mean,
            median_ate: median,
            absolute_bias,
        });
    }
    let ref_se = rows.iter().find(|r| r.estimator == reference).map(|r| r.se);
    if let Some(s) = ref_se.filter(|s| *s > 0.0) {
        for r in &mut rows {
            r.relative_uncertainty = Some(if r.estimator == reference { 1.0 } else { r.se / s });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlagCounts {
    pub nonconverged: usize,
    pub clipped: usize,
    pub extreme: usize,
    pub failed: usize,
}

/// Tallies record flags over all replicates and estimators.
pub fn flag_report(results: &[ReplicateResult]) -> FlagCounts {
    let mut c = FlagCounts::default();
    for e in results.iter().flat_map(|r| &r.records) {
        c.nonconverged += usize::from(e.flags.nonconverged);
        c.clipped += usize::from(e.flags.clipped);
        c.extreme += usize::from(e.flags.extreme);
        c.failed += usize::from(e.flags.failed);
    }
    c
}
