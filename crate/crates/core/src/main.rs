use std::process::ExitCode;

use qlocal::Error;

fn main() -> ExitCode {
    match qlocal::cli::run_cli(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) if msg.is_empty() => ExitCode::SUCCESS,
        Err(e @ (Error::Usage(_) | Error::Config { .. })) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
