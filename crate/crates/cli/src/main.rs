//! `tbs`: few-shot segmentation with background suppression.
//!
//! Exit codes: 0 ok, 1 I/O or other failure, 2 config, 3 numeric,
//! 4 checkpoint, 5 gradcheck.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tbs", version, about = "Few-shot segmentation with task-disruptive background suppression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the evaluation episodes of the configured fold to an episode dump.
    Gen(Common),
    /// Train from scratch; writes checkpoints and a loss log.
    Train(Common),
    /// Evaluate a checkpoint on test-fold episodes.
    Eval(Common),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(Common),
    /// Score maps and mask outlines for one episode.
    Visualize(Common),
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Run configuration (`key = value` text); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint file, or a directory of per-row checkpoints with --ablation.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the four suppression on/off rows instead of the configured one.
    #[arg(long)]
    pub ablation: bool,
    /// Overrides the configured shot count.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Score the ground truth instead of a model (eval test hook).
    #[arg(long, hide = true)]
    pub oracle: bool,
    /// Corrupt one op's backward pass (gradcheck negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Visualize(a) => commands::visualize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
