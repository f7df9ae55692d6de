//! `dipuq`: deep-image-prior denoising with uncertainty estimates.

mod args;
mod commands;
mod error;
mod output;
mod spec;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    let common = &cli.common;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(common, a),
        Command::Prepare(a) => commands::prepare(common, a),
        Command::Corrupt(a) => commands::corrupt_cmd(common, a),
        Command::Denoise(a) => commands::denoise(common, a),
        Command::Calibrate(a) => commands::calibrate(common, a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
