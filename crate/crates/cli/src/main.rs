mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refback::Error;

#[derive(Parser, Debug)]
#[command(name = "refback", version, about = "Reference-back task, attention-only transformer, and path patching")]
pub struct Cli {
    /// Key-value config file, or `default`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed for everything downstream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override any config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

/// Shorthands for frequently changed config keys.
#[derive(Args, Debug, Default)]
pub struct Common {
    #[arg(long, global = true)]
    pub profile: Option<String>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f32>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub num_symbols: Option<usize>,
    #[arg(long, global = true)]
    pub n_seeds: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/dev/test JSON-lines files and a manifest.
    Gen,
    /// Train one model; writes checkpoints, a log, and test metrics.
    Train,
    /// Score a checkpoint on a split; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score the non-learned baselines on a split.
    Heuristics {
        #[arg(long, default_value = "test")]
        split: String,
        /// Also sweep the symbol pool size against the reference scores.
        #[arg(long)]
        calibrate: bool,
        /// Sequences per calibration candidate.
        #[arg(long, default_value_t = 10_000)]
        calibration_sequences: usize,
    },
    /// Patch experiments on a checkpoint.
    Patch(commands::PatchArgs),
    /// Train several seeds and report gating subtasks over training.
    Sweep,
    /// Attention heatmaps for one sequence.
    Viz(commands::VizArgs),
}

/// Exit codes by failure class.
pub mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const DATA: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const OTHER: u8 = 1;
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => ("invalid_config", exit::CONFIG),
        Some(
            Error::InvalidInput(_)
            | Error::InapplicableCorruption(_)
            | Error::ComponentOutOfRange(_)
            | Error::NoStoredTuple { .. }
            | Error::TokenOutOfRange { .. }
            | Error::SequenceTooLong { .. },
        ) => ("invalid_input", exit::CONFIG),
        Some(Error::Io { .. }) => ("io", exit::IO),
        Some(Error::CorruptCheckpoint(_) | Error::Json(_) | Error::Empty(_)) => {
            ("bad_data", exit::DATA)
        }
        Some(Error::Diverged { .. }) => ("diverged", exit::DIVERGED),
        None => ("error", exit::OTHER),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let body = serde_json::json!({
                "error": { "kind": kind, "message": format!("{e:#}"), "exit_code": code }
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
