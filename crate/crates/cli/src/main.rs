//! `retrace`: solve, benchmark, sweep, calibrate, synthesize data and
//! self-check the staged search from the command line.
//!
//! Exit codes: 0 success, 1 other failure (including a failed simcheck),
//! 2 configuration error, 3 backend failure, 4 search exhausted.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use retrace_core::backends::BackendError;
use retrace_core::datagen::DatagenError;
use retrace_core::harness::HarnessError;
use retrace_core::search::SearchError;

use config::CommonFlags;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("search exhausted: {0}")]
    Exhausted(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Exhausted(_) => 4,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => CliError::Config(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Backend(b) => b.into(),
            SearchError::SearchExhausted { .. } => CliError::Exhausted(e.to_string()),
            SearchError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Config(m),
            HarnessError::InvalidItem { .. } | HarnessError::Parse { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Backend(b) => b.into(),
            DatagenError::InvalidSource { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "retrace", version, about = "Stage-wise reward-guided search over tagged responses")]
struct Cli {
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Command,
}

/// Where benchmark items come from.
#[derive(Debug, Clone, clap::Args)]
pub struct ItemSource {
    /// Benchmark items (JSONL).
    #[arg(long, value_name = "PATH", conflicts_with = "sim_items")]
    pub items: Option<PathBuf>,
    /// Use N synthetic items graded by the simulator's hidden flag.
    #[arg(long, value_name = "N")]
    pub sim_items: Option<usize>,
    /// Keep only items in this category (repeatable).
    #[arg(long = "category", value_name = "NAME")]
    pub categories: Vec<String>,
    /// Keep only the four reasoning-heavy categories.
    #[arg(long)]
    pub reasoning_subset: bool,
    /// Output directory for run logs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write one trace file per item.
    #[arg(long)]
    pub traces: bool,
    /// Record zero wall time so outputs are byte-identical across runs.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer one question and print the staged response.
    Solve {
        #[arg(long)]
        question: String,
        #[arg(long, value_name = "REF")]
        image: Option<String>,
        /// Write the search trace (JSONL) here.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Run one strategy over a benchmark.
    Bench {
        #[command(flatten)]
        source: ItemSource,
    },
    /// Sweep a grid of strategies and write the scaling curve table.
    Scale {
        #[command(flatten)]
        source: ItemSource,
        /// Curve table path (default: <out>/curve.csv, or ./curve.csv).
        #[arg(long, value_name = "PATH")]
        curve: Option<PathBuf>,
        /// Grid cell as STRATEGY:PARAM (repeatable; default grid when absent).
        #[arg(long = "cell", value_name = "STRATEGY:PARAM")]
        cells: Vec<String>,
    },
    /// Estimate reasoning-stage reward statistics.
    Calibrate {
        /// JSONL of {question, image_ref?, trajectory?, score?}.
        #[arg(long, value_name = "PATH", conflicts_with = "rollouts")]
        corpus: Option<PathBuf>,
        /// Roll out N unguided trajectories with the generator and score them.
        #[arg(long, value_name = "N")]
        rollouts: Option<usize>,
        /// Write the statistics as JSON here.
        #[arg(long, value_name = "PATH")]
        write: Option<PathBuf>,
    },
    /// Generate and filter staged training data.
    Datagen {
        /// Source records (JSONL).
        #[arg(long, value_name = "PATH")]
        sources: Option<PathBuf>,
        /// Output records (JSONL); resumed when it exists.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Compare exact enumeration with sampling on small simulated worlds.
    Simcheck {
        /// Sampled items per case.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let app = cli.common.resolve()?;
    match cli.command {
        Command::Solve {
            question,
            image,
            trace,
        } => commands::solve(&app, &question, image, trace.as_deref()),
        Command::Bench { source } => commands::bench(&app, &source),
        Command::Scale {
            source,
            curve,
            cells,
        } => commands::scale(&app, &source, curve, &cells),
        Command::Calibrate {
            corpus,
            rollouts,
            write,
        } => commands::calibrate(&app, corpus, rollouts, write.as_deref()),
        Command::Datagen { sources, out } => commands::datagen(&app, sources, out),
        Command::Simcheck { trials } => commands::simcheck(&app, trials),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RETRACE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
