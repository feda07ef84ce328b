//! `recall`: generate synthetic data, train, evaluate and compare
//! class-incremental runs.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

const AFTER_HELP: &str = "\
Training options are read, in decreasing priority, from flags, RECALL_* \
environment variables (e.g. RECALL_LEARNING_RATE), a TOML file given with \
--config, and the selected preset.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 I/O or format error.";

#[derive(Debug, Parser)]
#[command(name = "recall", version, about = "Rehearsal-free class-incremental training", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and sequence manifest
    Gen(commands::GenArgs),
    /// Train through every sequence of a manifest
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on the categories it has seen
    Eval(commands::EvalArgs),
    /// Compare the accuracy curves of completed runs
    Compare(commands::CompareArgs),
    /// Sweep loss modes, architectures and activations
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
