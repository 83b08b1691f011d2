use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = suture_cli::Cli::parse();
    match suture_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
