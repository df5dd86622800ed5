//! Command-line orchestration of the platerim modules.

mod args;
mod commands;
mod error;
pub mod serve;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, ServeArgs};
pub use error::{CliError, CliResult};

/// Parse `argv`, run the subcommand and return the process exit code.
/// Failures end with one JSON line on stderr: `{"error": kind, "message": text}`.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{}", e.render());
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            report(&CliError::Usage(first));
            return 2;
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn report(e: &CliError) {
    eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}
