//! `sarcnet`: synthesize data, extract features, train, evaluate, score,
//! explain and report.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sarcnet_core::features::Protocol;

#[derive(Debug, Parser)]
#[command(name = "sarcnet", version, about = "Sarcomere organization scoring pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config: a synthetic spec for `generate`, a training config otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Single worker thread.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "p1|p2")]
    pub protocol: Option<Protocol>,
    /// Replace the outputs of an earlier `generate`.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with known organization levels.
    Generate,
    /// Write the per-cell feature table.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train on the manifest's train split and evaluate on its test split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score every manifest record with a checkpoint.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score one cell and print the result.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        classmap: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grad-CAM overlays for manifest cells.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated cell ids; all cells when omitted.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        /// Residual stage (1-4) whose output is explained.
        #[arg(long, default_value_t = sarcnet_core::explain::FINAL_STAGE)]
        stage: usize,
        /// Also dump each heatmap as raw 32-bit floats.
        #[arg(long)]
        raw: bool,
    },
    /// Per-day histograms and summary from a predictions CSV.
    Report {
        #[arg(long)]
        predictions: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
