//! Batch command-line surface for the PCR keypoint pipeline: training,
//! inference, evaluation, and the data-side tools.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pcr_core::Error;

#[derive(Parser)]
#[command(
    name = "pcr",
    version,
    about = "Progressive context refinement keypoint detection pipeline",
    after_help = "Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on COCO-format annotations plus PGM rasters.
    Train(commands::TrainArgs),
    /// Run a checkpoint over detector boxes, one pose per detection.
    Infer(commands::InferArgs),
    /// Score results against ground truth with the OKS/AP protocol.
    Eval(commands::EvalArgs),
    /// Data-side tools: suppression, mining, pseudo-labels, merging,
    /// heatmap codecs, gradient checks, synthetic data.
    #[command(subcommand)]
    Tools(commands::Tools),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Infer(args) => commands::infer(args),
        Command::Eval(args) => commands::eval(args),
        Command::Tools(tool) => commands::tools(tool),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Maps error classes onto the documented exit codes.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}
