//! `sta4clc`: synthetic data, resilience features, graphs, training,
//! evaluation, ablation and what-if prediction from the command line.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sta4clc::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "sta4clc", version, about = "Disaster-aware commercial land use change model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario (four CSVs, truth.json, scenario.json).
    Synth(SynthArgs),
    /// Rolling resilience of every block's weekly visits.
    Resilience(DataArgs),
    /// Build the multi-relational block graph.
    Graph(DataArgs),
    /// Cross-validate the model and write a run directory.
    Train(DataArgs),
    /// Re-score a trained run on its validation folds.
    Evaluate(RunArgs),
    /// Run the eight-variant module ablation.
    Ablate(DataArgs),
    /// Predict with a trained run, optionally under what-if overrides.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scenario JSON; omitted fields take the reference values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding blocks.csv, pois.csv, weather.csv and disasters.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration JSON (or a bare model configuration).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prebuilt graph JSON; built from the data when absent.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigFlags,
}

#[derive(Debug, Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Resilience window in weeks.
    #[arg(long)]
    window: Option<usize>,
    /// Resilience histogram bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Nearest neighbours in the adjacency relation.
    #[arg(long)]
    k: Option<usize>,
    /// Sectors need more hosting blocks than this to form a relation.
    #[arg(long = "min-sector-blocks")]
    min_sector_blocks: Option<usize>,
    /// Weeks per period.
    #[arg(long, default_value_t = 104)]
    weeks: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// CSV with block_id, optional period_id, and replacement z_<k> columns.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Extra disaster rows in the disasters.csv layout.
    #[arg(long)]
    disasters: Option<PathBuf>,
}

/// A failure with its exit code class.
#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into() }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

impl From<sta4clc::Error> for CliError {
    fn from(e: sta4clc::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// `STA4CLC_THREADS`, default 1. Execution is sequential at any value, so
/// results never depend on it.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("STA4CLC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("STA4CLC_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_cap()?;
    log::debug!("thread cap {threads}; running sequentially");
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Resilience(a) => commands::resilience(&a),
        Command::Graph(a) => commands::graph(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Predict(a) => commands::predict(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
