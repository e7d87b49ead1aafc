//! `threem`: train, decode, evaluate and ablate multi-style captioners.

mod ablate;
mod args;
mod config;
mod eval;
mod generate;
mod gradcheck;
mod toy;
mod train;

use std::process::ExitCode;

use clap::Parser;
use threem::Error;

use args::{Cli, Command};

/// The run finished but a check it performs did not pass.
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

pub enum Outcome {
    Success,
    CheckFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Contract(_) => EXIT_INTERNAL,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("THREEM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Parameter(format!("THREEM_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Parameter(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Generate(a) => generate::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::MakeToy(a) => toy::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("threem: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
