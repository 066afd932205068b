//! Command-line interface: train models from config files, predict from
//! saved artifacts, run the optimizer benchmark, and cross-validate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

/// Errors carry the process exit class: 2 for configuration problems, 3 for
/// data problems, 4 for numeric failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error:\n{0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<direct::DirectError> for CliError {
    fn from(err: direct::DirectError) -> Self {
        use direct::DirectError as E;
        match err {
            E::Config(_) | E::Unsupported(_) => CliError::Config(err.to_string()),
            E::Data(_) | E::ShapeMismatch { .. } | E::Io(_) => CliError::Data(err.to_string()),
            E::Domain(_) | E::Numeric(_) | E::SizeExceeded { .. } => {
                CliError::Numeric(err.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "direct",
    about = "Exact-ELBO variational inference with discrete latent-variable priors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        /// Path to the run configuration file.
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Predict from a trained model artifact on a feature CSV.
    Predict {
        /// Path to the model artifact.
        #[arg(short, long)]
        model: PathBuf,
        /// Feature CSV (no target column).
        #[arg(short, long)]
        data: PathBuf,
        /// Emit exact moments (mean, and variance where defined). Default.
        #[arg(long, conflicts_with = "samples")]
        moments: bool,
        /// Emit per-draw predictions from N posterior samples instead.
        #[arg(long)]
        samples: Option<usize>,
        /// Seed for sampling paths.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path (stdout when omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare exact quasi-Newton training against the score-function
    /// baseline on synthetic data.
    Benchmark {
        /// Fourier feature count.
        #[arg(long, default_value_t = 20)]
        b: usize,
        /// Support levels per weight.
        #[arg(long, default_value_t = 3)]
        mbar: usize,
        /// Training rows.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Wall budget per method configuration, in seconds.
        #[arg(long, default_value_t = 10.0)]
        budget_secs: f64,
        /// Comma-separated learning rates for the baseline sweep.
        #[arg(long, default_value = "0.001,0.01,0.1", value_delimiter = ',')]
        lrs: Vec<f64>,
        /// Samples per score-function gradient estimate.
        #[arg(long, default_value_t = 100)]
        mc_samples: usize,
        /// Also run the baseline without reward-baseline subtraction.
        #[arg(long)]
        no_baseline_too: bool,
        /// Report directory.
        #[arg(long, default_value = "benchmark-out")]
        out: PathBuf,
    },
    /// K-fold cross-validation: per-fold RMSE, train time, and sparsity.
    Crossval {
        /// Path to the run configuration file.
        #[arg(short, long)]
        config: PathBuf,
        /// Fold count.
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Optional per-fold results CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Parse, apply DIRECT_* environment overrides, validate, and re-emit.
    Dump {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config } => commands::cmd_train(&config),
        Command::Predict {
            model,
            data,
            moments: _,
            samples,
            seed,
            output,
        } => commands::cmd_predict(&commands::PredictArgs {
            model,
            data,
            samples,
            seed,
            output,
        }),
        Command::Benchmark {
            b,
            mbar,
            n,
            seeds,
            budget_secs,
            lrs,
            mc_samples,
            no_baseline_too,
            out,
        } => commands::cmd_benchmark(&commands::BenchmarkArgs {
            b,
            mbar,
            n,
            seeds,
            budget_secs,
            lrs,
            mc_samples,
            no_baseline_too,
            out,
        }),
        Command::Crossval { config, k, out } => commands::cmd_crossval(&config, k, out.as_ref()),
        Command::Config {
            action: ConfigAction::Dump { config },
        } => commands::cmd_config_dump(&config),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
