use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cfopt::cli::Cli::parse();
    match cfopt::cli::run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
