//! `modiff`: train the toy denoiser, run paired quantization sweeps, check
//! the error bounds and print Bops tables.
//!
//! Exit codes: 0 on success, 1 when a run or verification fails, 2 on
//! configuration or I/O errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_list, ExperimentConfig};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<modiff::Error> for CliError {
    fn from(e: modiff::Error) -> Self {
        use modiff::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Csv(_) | E::Format(_) | E::Config(_) => Self::config(e.to_string()),
            E::Diverged { epoch, loss } => {
                Self::failure(format!("training diverged at epoch {epoch} (loss {loss})"))
            }
            other => Self::failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "modiff", version, about = "Modulated activation quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file and MODIFF_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (bundle directory for `train`, file otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a weight bundle.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Paired full-precision vs quantized sampling, one CSV row per step and layer.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Activation bit-widths, comma separated.
        #[arg(long)]
        bits: Option<String>,
        /// Modes (fp, direct, modulated, ec), comma separated.
        #[arg(long)]
        mode: Option<String>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the randomized property suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Bit-widths for the trajectory suites, comma separated.
        #[arg(long)]
        bits: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Activation and temporal-difference ranges over a full-precision run.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Print the Bops table for a chain of dense layers.
    Bops {
        /// Layer widths, input first.
        #[arg(long, default_value = "18,128,128,2")]
        dims: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Weight/activation bit pairs.
        #[arg(long, default_value = "8/32,8/8,8/4,8/3")]
        bits: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), common.seed)?;
            commands::train(&cfg, common.out)
        }
        Command::Sweep {
            common,
            bundle,
            bits,
            mode,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(common.config.as_deref(), common.seed)?;
            if let Some(b) = bits {
                cfg.sweep.bits = parse_list(&b, "bits")?;
            }
            if let Some(m) = mode {
                cfg.sweep.modes = parse_list(&m, "mode")?;
            }
            let seeds = cfg.sweep_seeds(common.seed);
            commands::sweep(
                &cfg,
                commands::SweepArgs {
                    seeds,
                    bundle,
                    out: common.out,
                    jobs,
                },
            )
        }
        Command::Verify {
            common,
            bundle,
            bits,
            inject_fault,
        } => {
            let mut cfg = ExperimentConfig::load(common.config.as_deref(), common.seed)?;
            if let Some(b) = bits {
                cfg.verify.trajectories.bits = parse_list(&b, "bits")?;
            }
            commands::verify(&cfg, bundle, inject_fault.as_deref(), common.out)
        }
        Command::Stats { common, bundle } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), common.seed)?;
            commands::stats(&cfg, bundle, common.out)
        }
        Command::Bops { dims, batch, bits } => {
            let dims: Vec<usize> = parse_list(&dims, "dims")?;
            commands::bops(&dims, batch, &commands::parse_bit_pairs(&bits)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
