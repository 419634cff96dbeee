//! `drt`: train routed transformers and regenerate every measurement as
//! JSON + CSV reports.

mod analyze;
mod bench;
mod config;
mod error;
mod inputs;
mod report;
mod train;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "drt", version, about = "Directionally routed transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a routed and/or baseline model.
    Train(train::TrainArgs),
    /// Run one measurement and write `<out>/<name>.json` and `.csv`.
    Analyze {
        #[command(subcommand)]
        op: analyze::AnalyzeCmd,
    },
    /// Forward-pass throughput with routing on and off.
    Bench(bench::BenchArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Analyze { op } => analyze::run(op),
        Command::Bench(a) => bench::run(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
