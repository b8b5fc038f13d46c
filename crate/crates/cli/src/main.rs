use std::process::ExitCode;

use clap::Parser;
use shapefit_cli::{run, Cli, EXIT_FATAL};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL as u8)
        }
    }
}
