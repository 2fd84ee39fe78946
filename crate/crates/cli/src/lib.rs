//! Command-line front end over the controller, agent runtime and analysis.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod args;
mod commands;
mod demo;
mod output;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

pub use args::{parse_args, AgentCli, Cli, Command};
pub use demo::run_emulated_demo;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// A request that parses but cannot be honoured, such as an unknown
/// reference scenario name. Exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("STING_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn finish(result: anyhow::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn parse_or_exit<P: Parser>(argv: impl IntoIterator<Item = OsString>) -> Result<P, ExitCode> {
    P::try_parse_from(argv).map_err(|e| {
        let _ = e.print();
        ExitCode::from(e.exit_code() as u8)
    })
}

/// Entry point of `sting-ctl`.
pub fn main_ctl(argv: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli: Cli = match parse_or_exit(argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    init_logging(cli.common.verbose);
    finish(commands::dispatch(&cli.common, &cli.command))
}

/// Entry point of `sting-agent`.
pub fn main_agent(argv: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli: AgentCli = match parse_or_exit(argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    init_logging(cli.common.verbose);
    finish(commands::agent(&cli.common, &cli.agent))
}
