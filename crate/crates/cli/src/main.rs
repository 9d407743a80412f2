//! `multijm` command-line interface.

mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] multijm::Error),
    #[error("cannot read {path}: {source}", path = .0.display(), source = .1)]
    Input(PathBuf, std::io::Error),
    #[error("cannot write {path}: {source}", path = .0.display(), source = .1)]
    Output(PathBuf, std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Auc(a) => commands::auc(a),
        Command::Summarize(a) => commands::summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
