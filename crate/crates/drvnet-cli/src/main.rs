//! Command-line front end for DR-VNet retinal vessel segmentation.

mod ablate;
mod config;
mod eval;
mod predict;
mod runner;
mod train;

use std::process::ExitCode;

use clap::Parser;

use drvnet::Error;

#[derive(Debug, Parser)]
#[command(name = "drvnet", version, about = "Retinal vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Train one or more runs and write a reusable manifest
    Train(train::TrainArgs),
    /// Evaluate trained checkpoints on their held-out test splits
    Eval(eval::EvalArgs),
    /// Segment a single image with a trained checkpoint
    Predict(predict::PredictArgs),
    /// Run the four-variant component study on a shared split
    Ablate(ablate::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => train::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Predict(args) => predict::run(args),
        Command::Ablate(args) => ablate::run(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_with(&e),
    }
}

/// User mistakes exit 2; broken internal invariants exit 1 with the
/// full diagnostic so the state that produced them is not lost.
fn exit_with(e: &Error) -> ExitCode {
    match e {
        Error::Internal(_) | Error::NonFiniteLoss { .. } => {
            eprintln!("internal error: {e}");
            eprintln!("diagnostic: {e:?}");
            ExitCode::from(1)
        }
        _ => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
