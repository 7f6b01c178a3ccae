//! Result files and tables: per-replicate `results.csv`, metric tables in CSV
//! or markdown, histogram data and the run metadata document.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimateRecord, EstimatorId, Flags};
use crate::harness::{FlagCounts, MetricsRow, ReplicateResult, ScenarioConfig, TruthMode};
use crate::nuisance::ClipPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::config(format!("unknown table format `{s}`"))),
        }
    }
}

/// Number formatting of metric tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableStyle {
    /// Decimals for percentage biases (0 or 1 in published tables).
    pub bias_decimals: usize,
}

impl Default for TableStyle {
    fn default() -> Self {
        TableStyle { bias_decimals: 1 }
    }
}

/// Decimals used for SEs, relative uncertainties and absolute biases.
const SE_DECIMALS: usize = 3;
const ATE_DECIMALS: usize = 6;

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    replicate: usize,
    estimator: EstimatorId,
    chi1: f64,
    chi0: f64,
    ate: f64,
    nonconverged: bool,
    clipped: bool,
    extreme: bool,
    failed: bool,
}

/// Writes one row per (replicate, estimator). Floats use the shortest
/// representation that parses back to the same value.
pub fn write_results_csv<W: Write>(results: &[ReplicateResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        for e in &r.records {
            w.serialize(ResultRow {
                replicate: r.replicate,
                estimator: e.estimator,
                chi1: e.chi1,
                chi0: e.chi0,
                ate: e.ate,
                nonconverged: e.flags.nonconverged,
                clipped: e.flags.clipped,
                extreme: e.flags.extreme,
                failed: e.flags.failed,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ReplicateResult>> {
    let mut out: Vec<ReplicateResult> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<ResultRow>() {
        let row = row?;
        let rec = EstimateRecord {
            estimator: row.estimator,
            chi1: row.chi1,
            chi0: row.chi0,
            ate: row.ate,
            flags: Flags { nonconverged: row.nonconverged, clipped: row.clipped, extreme: row.extreme, failed: row.failed },
        };
        match out.last_mut() {
            Some(last) if last.replicate == row.replicate => last.records.push(rec),
            _ => out.push(ReplicateResult { replicate: row.replicate, records: vec![rec] }),
        }
    }
    Ok(out)
}

fn fmt_bias(v: f64, absolute: bool, style: TableStyle) -> String {
    let d = if absolute { SE_DECIMALS } else { style.bias_decimals };
    let s = format!("{v:.d$}");
    // Avoid "-0" and "-0.0".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.SE_DECIMALS$}"))
}

const CSV_HEADER: [&str; 11] = [
    "estimator",
    "pct_bias",
    "pct_m_bias",
    "se",
    "relative_uncertainty",
    "dropped",
    "failed",
    "kept",
    "mean_ate",
    "median_ate",
    "absolute_bias",
];

/// Renders metrics as RFC 4180 CSV (all fields) or as a markdown table with
/// the columns of a published results table.
pub fn emit_table(rows: &[MetricsRow], format: TableFormat, style: TableStyle) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::domain("no metrics to tabulate"));
    }
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in rows {
                w.write_record([
                    r.estimator.to_string(),
                    fmt_bias(r.pct_bias, r.absolute_bias, style),
                    fmt_bias(r.pct_m_bias, r.absolute_bias, style),
                    format!("{:.SE_DECIMALS$}", r.se),
                    fmt_opt(r.relative_uncertainty),
                    r.dropped.to_string(),
                    r.failed.to_string(),
                    r.kept.to_string(),
                    format!("{:.ATE_DECIMALS$}", r.mean_ate),
                    format!("{:.ATE_DECIMALS$}", r.median_ate),
                    r.absolute_bias.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::State(e.to_string()))
        }
        TableFormat::Markdown => {
            let absolute = rows.iter().any(|r| r.absolute_bias);
            let (b, m) = if absolute { ("Bias", "M-Bias") } else { ("% Bias", "% M-Bias") };
            let mut s = format!("| Estimator | {b} | {m} | SE | Relative Uncertainty | Dropped |\n");
            s.push_str("|---|---:|---:|---:|---:|---:|\n");
            for r in rows {
                s.push_str(&format!(
                    "| {} | {} | {} | {:.SE_DECIMALS$} | {} | {} |\n",
                    r.estimator,
                    fmt_bias(r.pct_bias, r.absolute_bias, style),
                    fmt_bias(r.pct_m_bias, r.absolute_bias, style),
                    r.se,
                    r.relative_uncertainty.map_or_else(|| "-".to_string(), |x| format!("{x:.SE_DECIMALS$}")),
                    r.dropped
                ));
            }
            Ok(s)
        }
    }
}

/// Parses a CSV table written by [`emit_table`].
pub fn parse_table_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse { location: "header".into(), message: "not a metrics table".into() });
    }
    let num = |s: &str, col: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse { location: col.into(), message: format!("bad number `{s}`") })
    };
    let count = |s: &str, col: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse { location: col.into(), message: format!("bad count `{s}`") })
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        out.push(MetricsRow {
            estimator: f(0).parse()?,
            pct_bias: num(f(1), "pct_bias")?,
            pct_m_bias: num(f(2), "pct_m_bias")?,
            se: num(f(3), "se")?,
            relative_uncertainty: if f(4).is_empty() { None } else { Some(num(f(4), "relative_uncertainty")?) },
            dropped: count(f(5), "dropped")?,
            failed: count(f(6), "failed")?,
            kept: count(f(7), "kept")?,
            mean_ate: num(f(8), "mean_ate")?,
            median_ate: num(f(9), "median_ate")?,
            absolute_bias: f(10) == "true",
        });
    }
    Ok(out)
}

/// Equal-width histogram of the kept estimates (not failed, finite, not
/// flagged extreme) as `bin_center,count` CSV. A constant sample yields one bin.
pub fn emit_histogram_data(results: &[ReplicateResult], estimator: EstimatorId, bins: usize) -> Result<String> {
    if bins < 1 {
        return Err(Error::config("need at least one bin"));
    }
    let recs: Vec<&EstimateRecord> =
        results.iter().flat_map(|r| r.records.iter()).filter(|e| e.estimator == estimator).collect();
    if recs.is_empty() {
        return Err(Error::config(format!("estimator `{estimator}` is not in the results")));
    }
    let kept: Vec<f64> = recs
        .iter()
        .filter(|e| !e.flags.failed && !e.flags.extreme && e.ate.is_finite())
        .map(|e| e.ate)
        .collect();
    let mut s = String::from("bin_center,count\n");
    if kept.is_empty() {
        return Ok(s);
    }
    let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        s.push_str(&format!("{lo},{}\n", kept.len()));
        return Ok(s);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in kept {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    for (k, c) in counts.iter().enumerate() {
        s.push_str(&format!("{},{c}\n", lo + (k as f64 + 0.5) * width));
    }
    Ok(s)
}

/// Parses histogram CSV back into `(center, count)` pairs.
pub fn parse_histogram(text: &str) -> Result<Vec<(f64, usize)>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).records() {
        let rec = rec?;
        let bad = || Error::Parse { location: "histogram".into(), message: format!("bad row {rec:?}") };
        let c = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let n = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.push((c, n));
    }
    Ok(out)
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: String,
    pub crate_version: String,
    pub master_seed: u64,
    pub n: usize,
    pub replicates: usize,
    pub workers: usize,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub truth_mode: TruthMode,
    pub clip: ClipPolicy,
    pub ps_clip: ClipPolicy,
    pub fence: f64,
    pub flags: FlagCounts,
    /// Replicates dropped by the extreme-result fence, per estimator.
    pub dropped: BTreeMap<String, usize>,
    /// The fully defaulted scenario, as TOML.
    pub scenario_echo: String,
}

impl RunMeta {
    pub fn new(config: &ScenarioConfig, truth: (f64, f64), flags: FlagCounts, metrics: &[MetricsRow], echo: String) -> Self {
        RunMeta {
            scenario: config.name.clone(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed,
            n: config.n,
            replicates: config.replicates,
            workers: config.workers,
            truth: truth.0,
            truth_mc_se: truth.1,
            truth_mode: config.truth,
            clip: config.specs.ccmar_options.clip,
            ps_clip: config.specs.comparators.ps_clip,
            fence: config.fence,
            flags,
            dropped: metrics.iter().map(|m| (m.estimator.to_string(), m.dropped)).collect(),
            scenario_echo: echo,
        }
    }
}
