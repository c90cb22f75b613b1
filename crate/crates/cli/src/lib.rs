//! Command-line driver: CSV ingestion, configuration, experiment runs and
//! result files.
//!
//! Exit codes: 0 success, 1 I/O failure while writing results, 2 invalid
//! configuration, 3 invalid or unusable data. Every failure is also logged
//! to stderr as one JSON object, and appended to `--error-log` when given.

pub mod commands;
pub mod error;
pub mod io;
pub mod options;

use std::io::Write;

use clap::Parser;

pub use error::{CliError, CliResult};
use options::{Cli, Settings};

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Config(e.render().to_string().trim().to_string());
            eprintln!("{}", err.log_line("-"));
            return err.exit_code();
        }
    };
    let command = cli.command.name();
    let mut error_log = cli.opts.error_log.clone();
    let result = cli.opts.with_config_file().and_then(|o| {
        error_log = o.error_log.clone();
        let settings = Settings::resolve(cli.command, &o)?;
        commands::execute(&settings)
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(err) => {
            let line = err.log_line(command);
            eprintln!("{line}");
            if let Some(path) = error_log {
                if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
                    let _ = writeln!(f, "{line}");
                }
            }
            err.exit_code()
        }
    }
}
