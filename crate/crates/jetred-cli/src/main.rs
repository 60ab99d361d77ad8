use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

/// Reduce stochastic PDEs with finite-dimensional Lie algebras of
/// generators to finite-dimensional Stratonovich SDEs.
#[derive(Parser)]
#[command(name = "jetred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Bracket table, closure verdict and transversality of a model.
    Check {
        model: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Flow-coordinate coefficient table of the closed algebra.
    Phi { model: PathBuf },
    /// The reduced SDE and its reconstruction data.
    Reduce {
        model: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Sample paths of the reduced SDE.
    Simulate {
        model: PathBuf,
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        /// Explosion bound on |A|.
        #[arg(long)]
        bound: Option<f64>,
        /// Keep every k-th step in the CSV output.
        #[arg(long, default_value_t = 1)]
        record_every: usize,
        /// Reconstructed curves per path (written only with --out).
        #[arg(long, default_value_t = 10)]
        snapshots: usize,
        /// Directory for per-path CSV files and the run manifest; without it
        /// one CSV with a `path` column goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduced pipeline against the finite-difference solver on one path.
    Validate {
        model: PathBuf,
        #[arg(long)]
        dx: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        snapshots: usize,
        /// Fraction of the domain excluded at each end of the metrics.
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        /// Directory for the two solutions as CSV and the metrics JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a bundled model file.
    Example {
        /// hjm, hunter-saxton, filtering or zakai
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Check { model, format } => commands::check(&model, format),
        Command::Phi { model } => commands::phi(&model),
        Command::Reduce { model, format } => commands::reduce(&model, format),
        Command::Simulate { model, t_final, dt, seed, paths, bound, record_every, snapshots, out } => {
            commands::simulate(&model, commands::SimArgs { t_final, dt, seed, paths, bound, record_every, snapshots, out })
        }
        Command::Validate { model, dx, dt, t_final, seed, snapshots, margin, out } => {
            commands::validate(&model, commands::ValidateArgs { dx, dt, t_final, seed, snapshots, margin, out })
        }
        Command::Example { name, out } => commands::example(&name, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
