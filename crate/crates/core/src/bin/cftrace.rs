use std::process::ExitCode;

use cftrace::cli::{run, CliError};

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("cftrace: {e}");
            ExitCode::FAILURE
        }
    }
}
