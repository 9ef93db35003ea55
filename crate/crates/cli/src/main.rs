use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    match binflow_cli::run(binflow_cli::Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
