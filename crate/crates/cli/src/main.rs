//! `dckerr`: experiment runner for the DC Kerr toolkit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, LoadedConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dckerr",
    version,
    about = "Simulate and invert the DC Kerr effect"
)]
struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Strong stationary field by fixed-point iteration, with the expansion check.
    Stationary {
        #[arg(long)]
        config: PathBuf,
    },
    /// Geometric-optics beam through a medium, recorded on a detector plane.
    Forward {
        #[arg(long)]
        config: PathBuf,
    },
    /// Direct 1D simulation of the nonlinear wave equation.
    Fdtd {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recovers cos(tau) and sin(tau) from a trace file.
    Extract {
        #[arg(long)]
        trace: PathBuf,
        /// `auto`, `start,end`, or several `start,end` pairs separated by `;`.
        #[arg(long, default_value = "auto")]
        window: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward runs and extraction over all angles and offsets.
    Sinogram {
        #[arg(long)]
        config: PathBuf,
    },
    /// Filtered backprojection of a sinogram.
    Reconstruct {
        #[arg(long)]
        sinogram: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per axis; defaults to the number of offsets.
        #[arg(long)]
        pixels: Option<usize>,
        /// Relative L2 error accepted against a known phantom.
        #[arg(long, default_value_t = 0.05)]
        max_error: f64,
    },
    /// Kerr cell scans and cross-validation against the direct solver.
    Kerrcell {
        #[arg(long)]
        config: PathBuf,
    },
    /// Phase-law convergence over an h sweep.
    Convergence {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let load = |p: &PathBuf| LoadedConfig::load(p);
    match &cli.command {
        Command::Stationary { config } => commands::stationary(&load(config)?),
        Command::Forward { config } => commands::forward(&load(config)?),
        Command::Fdtd { config } => commands::fdtd(&load(config)?),
        Command::Extract { trace, window, out } => commands::extract(trace, window, out.as_deref()),
        Command::Sinogram { config } => commands::sinogram(&load(config)?),
        Command::Reconstruct {
            sinogram,
            out,
            pixels,
            max_error,
        } => commands::reconstruct(sinogram, out, *pixels, *max_error),
        Command::Kerrcell { config } => commands::kerrcell(&load(config)?),
        Command::Convergence { config } => commands::convergence(&load(config)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.join(output::MANIFEST_NAME).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
