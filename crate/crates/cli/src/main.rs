use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = sahr_cli::Cli::parse();
    match sahr_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
