mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "loopsampler", version, about = "Boson sampling with optical feedback")]
pub struct Cli {
    /// Upper bound on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config JSON.
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distribution of the detected modes after each pass.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EvolveMethod::Pdm)]
        method: EvolveMethod,
    },
    /// Stationary looped state and its detected distribution.
    Stationary {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = StationaryMethod::Superop)]
        method: StationaryMethod,
        /// Highest tensor order max(k, l) for the tensor method.
        #[arg(long, default_value_t = 8)]
        rank_cap: usize,
    },
    /// Stabilization-time histogram over Haar-random interferometers.
    Stabilization {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Master seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Infidelity to the stationary state that counts as settled.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iterations: usize,
    },
    /// Detected stationary state rebuilt from correlation tensors.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ReconstructMethod::Analytic)]
        method: ReconstructMethod,
        #[arg(long, default_value_t = 3)]
        rank_cap: usize,
    },
    /// Photon-count samples from the stationary or a per-pass distribution.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        shots: usize,
        /// Defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sample pass `k` instead of the stationary distribution.
        #[arg(long)]
        iteration: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvolveMethod {
    Unfold,
    Pdm,
    Kraus,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StationaryMethod {
    Superop,
    Iterate,
    Tensors,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReconstructMethod {
    Analytic,
    Convex,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(CliError::config("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError { code: EXIT_CONFIG, kind: "config", message: e.to_string() }),
        None => Ok(()),
    }
    .and_then(|()| commands::run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
