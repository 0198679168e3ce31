use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use commands::Failure;

/// Number token loss experiments: data, training, evaluation, timing,
/// loss landscapes and self-checks.
#[derive(Debug, Parser)]
#[command(name = "ntl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output directory; defaults to `$NTL_OUT/<command>` or `ntl-out/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rerun even when the output directory already holds an identical manifest.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train, interpolation and extrapolation splits.
    Datagen(commands::DatagenArgs),
    /// Train the decoder on a generated dataset.
    Train(commands::TrainArgs),
    /// Score a checkpoint on one split.
    Eval(commands::EvalArgs),
    /// Compare the sample efficiency of two training runs.
    Compare(commands::CompareArgs),
    /// Time losses alone and inside a full training step.
    Bench(commands::BenchArgs),
    /// Emit loss landscape data for the digit toy problems.
    Landscape(commands::LandscapeArgs),
    /// Run the gradient and transport property suites.
    Selfcheck(commands::SelfcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(a) => commands::datagen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Bench(a) => commands::bench(a),
        Command::Landscape(a) => commands::landscape(a),
        Command::Selfcheck(a) => commands::selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Failure::classify(&e).code())
        }
    }
}
