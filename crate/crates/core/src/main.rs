use std::process::ExitCode;

use clap::Parser;
use cmbdet::cli::{execute, Cli};
use cmbdet::Error;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MetricFloor(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
