//! `kvnorm`: train toy models, evaluate KV cache compression policies and
//! export the analyses as CSV/JSON.
//!
//! Exit codes: 0 on success, 2 for usage, config or input errors, 3 when a
//! run fails numerically (divergence or non-finite activations).

mod args;
mod commands;
mod error;
mod manifest;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
        Command::Analyze(a) => commands::analyze::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
