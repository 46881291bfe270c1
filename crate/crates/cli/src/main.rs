//! `ssr`: verification, desk-scale training, overhead benchmarks and one-shot
//! routing for selective Sinkhorn routing.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config or input error,
//! 3 numeric failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Why a command failed, with the exit code it maps to. `report` is printed
/// to stdout as machine-readable JSON.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    pub report: Option<String>,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
            report: None,
        }
    }
}

impl From<ssr_core::Error> for Failure {
    fn from(e: ssr_core::Error) -> Self {
        let code = if e.is_numeric() { EXIT_NUMERIC } else { EXIT_INPUT };
        let report = match &e {
            ssr_core::Error::Overflow(diag) => {
                serde_json::to_string(&serde_json::json!({ "error": "overflow", "diagnostics": diag })).ok()
            }
            ssr_core::Error::Underflow { row, col, diagnostics } => serde_json::to_string(&serde_json::json!({
                "error": "underflow", "row": row, "col": col, "diagnostics": diagnostics
            }))
            .ok(),
            _ => None,
        };
        Self {
            code,
            message: e.to_string(),
            report,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ssr",
    version,
    about = "Selective Sinkhorn routing for sparse mixture-of-experts layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant and oracle suite.
    Verify {
        /// Only run properties whose name contains this pattern.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one block per named router config on the synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time forward + backward per router config relative to vanilla.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Route a score matrix read from a headerless CSV file.
    Route(RouteArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CostArg {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ForceArg {
    Softmax,
    Sinkhorn,
}

/// Unset options fall back to the router defaults.
#[derive(Debug, Args)]
struct RouteArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long, value_enum)]
    cost: Option<CostArg>,
    #[arg(long)]
    alpha_noise: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    force_branch: Option<ForceArg>,
    /// Use the unstabilized solver, which can overflow.
    #[arg(long)]
    naive: bool,
    /// Also print the transport plan and solver diagnostics.
    #[arg(long)]
    plan: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { filter, seed } => commands::verify(filter.as_deref(), seed),
        Command::Train { config } => commands::train(&config),
        Command::Bench { config } => commands::bench(&config),
        Command::Route(args) => commands::route(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if let Some(report) = &failure.report {
                println!("{report}");
            }
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
