//! `shadowstorm` command-line driver: synthetic data generation, single-image
//! attacks, budget sweeps, gradient checks and toy-model training.
//!
//! Exit codes: 0 success, 1 partial sweep failure, 2 usage, 3 I/O,
//! 4 numeric failure, 5 validation failure.

pub mod commands;
pub mod error;
pub mod parse;
pub mod report;
pub mod zoo;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "shadowstorm",
    version,
    about = "Uniform and intensity-adaptive PGD attacks on shadow-removal models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Gen(commands::gen::GenArgs),
    Attack(commands::attack::AttackArgs),
    Bench(commands::bench::BenchArgs),
    Gradcheck(commands::gradcheck::GradcheckArgs),
    Train(commands::train::TrainArgs),
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => commands::gen::run(a),
        Command::Attack(a) => commands::attack::run(a),
        Command::Bench(a) => commands::bench::run(a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
        Command::Train(a) => commands::train::run(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code, printing diagnostics to stderr.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
