//! The `regseg` command-line tool.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod suites;

use std::io::Write;

pub use config::{Args, Cli, Command, ReportFormat, RunConfig};
pub use error::CliError;

/// Runs one command with already-parsed flags.
pub fn run(command: Command, args: &Args, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(args)?;
    match command {
        Command::Describe => commands::describe(&cfg, out),
        Command::Fov => commands::fov(&cfg, out),
        Command::Infer => commands::infer(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::Bench => commands::bench(&cfg, out),
        Command::Selftest => commands::selftest(&cfg, out),
    }
}
