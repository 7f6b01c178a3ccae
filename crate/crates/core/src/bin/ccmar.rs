use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccmar::estimators::EstimatorId;
use ccmar::harness::{flag_report, mark_extremes, run_scenario, summarize, TruthMode, DEFAULT_FENCE};
use ccmar::report::{
    emit_histogram_data, emit_table, read_results_csv, write_results_csv, RunMeta, TableFormat, TableStyle,
};
use ccmar::scenario_file::{parse_scenario_file, to_toml};
use ccmar::{Error, Result};

#[derive(Parser)]
#[command(name = "ccmar", version, about = "CCMAR treatment-effect estimators and simulation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation scenario and write results, metrics and metadata.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the scenario file's value.
        #[arg(long, env = "CCMAR_WORKERS")]
        workers: Option<usize>,
        /// Use this ground truth instead of computing it.
        #[arg(long, allow_hyphen_values = true)]
        truth: Option<f64>,
        #[arg(long, default_value_t = 1)]
        bias_decimals: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a scenario's ground-truth ATE.
    Truth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        nmc: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Print the metrics table of a finished run.
    Table {
        /// Run directory or its results.csv.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: TableFormat,
        /// Override the truth recorded in meta.json.
        #[arg(long, allow_hyphen_values = true)]
        truth: Option<f64>,
        #[arg(long, default_value_t = 1)]
        bias_decimals: usize,
    },
    /// Print histogram data of one estimator's kept estimates.
    Hist {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        estimator: EstimatorId,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { scenario, reps, n, seed, workers, truth, bias_decimals, out } => {
            let mut config = parse_scenario_file(&scenario)?;
            if let Some(r) = reps {
                config.replicates = r;
            }
            if let Some(n) = n {
                config.n = n;
            }
            if let Some(s) = seed {
                config.master_seed = s;
            }
            if let Some(w) = workers {
                config.workers = w.max(1);
            }
            if let Some(v) = truth {
                config.truth = TruthMode::Fixed { value: v };
            }
            config.validate()?;
            let echo = to_toml(&config)?;
            log::info!("computing ground truth ({:?})", config.truth);
            let truth = config.compute_truth()?;
            log::info!("truth = {} (mc-se {})", truth.0, truth.1);

            let mut results = run_scenario(&config)?;
            mark_extremes(&mut results, config.fence);
            fs::create_dir_all(&out)?;
            write_results_csv(&results, fs::File::create(out.join("results.csv"))?)?;

            let reference = if config.suite.contains(&EstimatorId::CcmarIf) { EstimatorId::CcmarIf } else { config.suite[0] };
            let metrics = summarize(&results, truth.0, reference, config.fence)?;
            let style = TableStyle { bias_decimals };
            fs::write(out.join("metrics.csv"), emit_table(&metrics, TableFormat::Csv, style)?)?;
            let md = emit_table(&metrics, TableFormat::Markdown, style)?;
            fs::write(out.join("metrics.md"), &md)?;
            let meta = RunMeta::new(&config, truth, flag_report(&results), &metrics, echo);
            fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
            print!("{md}");
            Ok(())
        }
        Command::Truth { scenario, nmc, repeats } => {
            let mut config = parse_scenario_file(&scenario)?;
            match (&mut config.truth, nmc, repeats) {
                (TruthMode::MonteCarlo { n_mc, repeats: r }, a, b) => {
                    *n_mc = a.unwrap_or(*n_mc);
                    *r = b.unwrap_or(*r);
                }
                (_, None, None) => {}
                (_, a, b) => {
                    config.truth = TruthMode::MonteCarlo { n_mc: a.unwrap_or(2_000_000), repeats: b.unwrap_or(5) };
                }
            }
            let (value, se) = config.compute_truth()?;
            println!("truth,mc_se\n{value},{se}");
            Ok(())
        }
        Command::Table { input, format, truth, bias_decimals } => {
            let (results_path, meta) = locate(&input)?;
            let results = read_results_csv(fs::File::open(&results_path)?)?;
            let truth = match (truth, &meta) {
                (Some(t), _) => t,
                (None, Some(m)) => m.truth,
                (None, None) => return Err(Error::config("no meta.json next to the results; pass --truth")),
            };
            let fence = meta.as_ref().map_or(DEFAULT_FENCE, |m| m.fence);
            let reference = EstimatorId::CcmarIf;
            let metrics = summarize(&results, truth, reference, fence)?;
            print!("{}", emit_table(&metrics, format, TableStyle { bias_decimals })?);
            Ok(())
        }
        Command::Hist { input, estimator, bins } => {
            let (results_path, _) = locate(&input)?;
            let results = read_results_csv(fs::File::open(&results_path)?)?;
            print!("{}", emit_histogram_data(&results, estimator, bins)?);
            Ok(())
        }
    }
}

/// Resolves a run directory or results file to `(results.csv, meta.json if present)`.
fn locate(input: &Path) -> Result<(PathBuf, Option<RunMeta>)> {
    let (results, dir) = if input.is_dir() {
        (input.join("results.csv"), input.to_path_buf())
    } else {
        (input.to_path_buf(), input.parent().map_or_else(PathBuf::new, Path::to_path_buf))
    };
    if !results.exists() {
        return Err(Error::config(format!("{} does not exist", results.display())));
    }
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() { Some(serde_json::from_str(&fs::read_to_string(meta_path)?)?) } else { None };
    Ok((results, meta))
}
