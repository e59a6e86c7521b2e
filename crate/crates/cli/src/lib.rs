//! Command-line front end: weights, sample allocation, estimation and
//! replication studies from configuration files.
//!
//! Exit codes: 0 on success, 1 for file-system errors, 2 for configuration
//! errors (including bad command lines) and 3 for numerical failures.

pub mod bench;
pub mod config;
pub mod error;
pub mod output;
pub mod tasks;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench::{run_bench, BenchOptions};
use crate::config::Experiment;
pub use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, write_json, write_table, MANIFEST_FILE, RESULTS_FILE};
use crate::tasks::Report;

pub const DEFAULT_OUT_DIR: &str = "mlblue-out";

#[derive(Debug, Clone, Parser)]
#[command(name = "mlblue", version, about = "Multilevel best linear unbiased estimators")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed; overrides the configured one.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, value_name = "N", env = "MLBLUE_THREADS")]
    pub threads: Option<usize>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Check the configuration and referenced files.
    Validate,
    /// Optimal weights and their variance.
    Weights,
    /// Sample sizes for a cost budget or a target standard deviation.
    Allocate {
        #[arg(long, conflicts_with = "target")]
        budget: Option<f64>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// One estimate from one ensemble.
    Estimate,
    /// Empirical against predicted statistics over independent ensembles.
    Replicate {
        /// Number of replications; overrides `replicate.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Optimal localization weights of one ensemble.
    Localize,
    /// Time the fast and direct covariance-of-covariance assemblies.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = BenchOptions::default().sizes)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = BenchOptions::default().members)]
        members: usize,
        #[arg(long, default_value_t = BenchOptions::default().levels)]
        levels: usize,
        #[arg(long, default_value_t = BenchOptions::default().repeats)]
        repeats: usize,
        /// Largest n at which the direct double sum is timed.
        #[arg(long, default_value_t = BenchOptions::default().naive_max)]
        naive_max: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Weights => "weights",
            Command::Allocate { .. } => "allocate",
            Command::Estimate => "estimate",
            Command::Replicate { .. } => "replicate",
            Command::Localize => "localize",
            Command::Bench { .. } => "bench",
        }
    }
}

/// Files written by a successful run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub results: Value,
}

fn load(cli: &Cli) -> CliResult<(Experiment, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config(format!("{} needs --config", cli.command.name())))?;
    let exp = Experiment::load(path, cli.seed)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((exp, base))
}

fn dispatch(cli: &Cli) -> CliResult<(Report, Option<PathBuf>, u64)> {
    if let Command::Bench {
        sizes,
        members,
        levels,
        repeats,
        naive_max,
    } = &cli.command
    {
        let seed = cli.seed.unwrap_or(0);
        let r = run_bench(&BenchOptions {
            sizes: sizes.clone(),
            members: *members,
            levels: *levels,
            repeats: *repeats,
            naive_max: *naive_max,
            seed,
        })?;
        let mut results = json!({"command": "bench", "seed": seed});
        results["bench"] = json!(r);
        return Ok((
            Report {
                results,
                tables: Vec::new(),
            },
            None,
            seed,
        ));
    }
    let (exp, base) = load(cli)?;
    let report = match &cli.command {
        Command::Validate => tasks::validate_report(&exp),
        Command::Weights => tasks::weights_report(&exp)?,
        Command::Allocate { budget, target } => tasks::allocate_report(&exp, *budget, *target)?,
        Command::Estimate => tasks::estimate_report(&exp)?,
        Command::Replicate { count } => {
            let count = count.unwrap_or(exp.config.replicate.count);
            if count < 2 {
                return Err(CliError::config("replicate needs at least 2 replications"));
            }
            tasks::replicate_report(&exp, count)?
        }
        Command::Localize => tasks::localize_report(&exp)?,
        Command::Bench { .. } => unreachable!("handled above"),
    };
    let out = exp.config.output.dir.as_ref().map(|d| base.join(d));
    let report = if exp.config.output.csv {
        report
    } else {
        Report {
            tables: Vec::new(),
            ..report
        }
    };
    Ok((report, out, exp.seed))
}

/// Runs one subcommand and writes its result files.
pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let start = Instant::now();
    let pool = match cli.threads {
        Some(0) => return Err(CliError::config("--threads must be at least 1")),
        Some(t) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CliError::config(format!("cannot start {t} threads: {e}")))?,
        ),
        None => None,
    };
    let (report, configured_out, seed) = match &pool {
        Some(p) => p.install(|| dispatch(cli))?,
        None => dispatch(cli)?,
    };
    let compute_seconds = start.elapsed().as_secs_f64();
    let threads = pool
        .as_ref()
        .map_or_else(rayon::current_num_threads, rayon::ThreadPool::current_num_threads);

    let out_dir = cli
        .out
        .clone()
        .or(configured_out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    ensure_dir(&out_dir)?;
    let mut files = vec![write_json(&out_dir, RESULTS_FILE, &report.results)?];
    for t in &report.tables {
        files.push(write_table(&out_dir, t)?);
    }
    let names: Vec<String> = files
        .iter()
        .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "tool": "mlblue",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": mlblue_core::VERSION,
        "schema_version": config::SCHEMA_VERSION,
        "command": cli.command.name(),
        "config": cli.config.as_ref().map(|p| p.display().to_string()),
        "seed": seed,
        "generator": mlblue_core::rng::GENERATOR,
        "threads": threads,
        "outputs": names,
        "timings": {
            "compute_seconds": compute_seconds,
            "total_seconds": start.elapsed().as_secs_f64(),
        },
    });
    files.push(write_json(&out_dir, MANIFEST_FILE, &manifest)?);
    Ok(Outcome {
        out_dir,
        files,
        results: report.results,
    })
}
