//! `nfcjamlab`: simulate jammed ISO 14443A sessions, run the eavesdropping
//! attack on them, sweep countermeasures and classify blocking cards.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 no usable data.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nfcjamlab", version, about = "Blocking-card jamming and eavesdropping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate repeated read sessions under a jammer and write the traces.
    Simulate(commands::SimulateArgs),
    /// Run the attack on a directory of traces.
    Attack(commands::AttackArgs),
    /// Sweep a jammer parameter and report mean rates per point.
    Countermeasure(commands::CountermeasureArgs),
    /// Label a blocking card from recordings with and without a field.
    Classify(commands::ClassifyArgs),
    /// Recompute metrics from recovered transcripts and ground truth.
    Metrics(commands::MetricsArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0, usage errors exit 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Attack(a) => commands::attack(a),
        Command::Countermeasure(a) => commands::countermeasure(a),
        Command::Classify(a) => commands::classify(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
