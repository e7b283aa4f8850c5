use clap::Parser;
use seer_cli::{Cli, CliError};

fn main() {
    // Die quietly when a pager closes the pipe instead of panicking.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; bad usage is a
            // validation failure.
            let _ = err.print();
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    match seer_cli::run(cli) {
        Ok(()) => {}
        Err(CliError::Validation(err)) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
