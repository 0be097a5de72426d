use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match tqdm_cli::run(tqdm_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
