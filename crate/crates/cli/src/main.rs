mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Zero-shot weather-station forecasting experiments.
#[derive(Debug, Parser)]
#[command(name = "microcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: observations.csv, stations.csv, world.json.
    Gen(GenArgs),
    /// Train one phase and write a checkpoint.
    Train(TrainArgs),
    /// Compare models, or run a learning curve, and write reports.
    Eval(EvalArgs),
    /// Write a prediction-vs-truth trace from a trained checkpoint.
    Forecast(ForecastArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 11)]
    stations: usize,
    #[arg(long, default_value_t = 2.0)]
    years: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long, default_value_t = 5.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_f: f64,
    /// Output directory [default: $MICROCAST_DATA]
    #[arg(long, env = config::DATA_ENV)]
    out: PathBuf,
}

/// Settings shared by every command that reads an experiment config.
#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with observations.csv and stations.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic world instead of files: `stations,years,seed`.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<String>,
    #[arg(long)]
    target: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = ["backbone", "transform"])]
    phase: String,
    #[arg(long, default_value = "zero_shot")]
    scenario: String,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone checkpoint to start phase 2 from.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with a .jsonl extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// `all` or a comma-separated list.
    #[arg(long)]
    models: Option<String>,
    /// full_data, zero_shot or both.
    #[arg(long)]
    scenario: Option<String>,
    /// A count N (seeds 1..=N) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Score a trained checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training-station counts for a learning curve, e.g. 2,4,6,8.
    #[arg(long)]
    curve: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the checkpoint's target.
    #[arg(long)]
    station: Option<String>,
    /// First forecast hour, `YYYY-MM-DD HH:00`; defaults to two weeks before
    /// the end of the data.
    #[arg(long)]
    from: Option<String>,
    /// End of the span (exclusive).
    #[arg(long)]
    to: Option<String>,
    #[arg(long, default_value = "backbone_transform")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Contract(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Contract(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Contract(m) => f.write_str(m),
        }
    }
}

impl From<microcast_core::error::Error> for CliError {
    fn from(e: microcast_core::error::Error) -> Self {
        use microcast_core::error::Error;
        match e {
            Error::InvalidArgument(_) | Error::UnknownStation { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Contract(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Forecast(a) => commands::forecast(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
