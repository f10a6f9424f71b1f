use std::process::ExitCode;

use clap::Parser;
use ssn_cli::commands::{run, Cli, Outcome};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(why)) => {
            eprintln!("check failed: {why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("run `ssn --help` for usage");
            ExitCode::from(2)
        }
    }
}
