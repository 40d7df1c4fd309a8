// SPDX-License-Identifier: MIT OR Apache-2.0

//! `olakit`: order-level attention pipeline from traces to reports.
//!
//! Exit codes: 0 success, 1 validation or configuration failure, 2 I/O
//! failure, 3 probe parameters changed during a frozen evaluation.

mod args;
mod commands;
mod config;
mod corpus;

use std::process::ExitCode;

use clap::FromArgMatches;

use args::Cli;

fn main() -> ExitCode {
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let command = args::command();
    let argv = match config::expand(&command, argv) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        return report(&anyhow::anyhow!(olakit::Error::Config(format!("worker pool: {e}"))));
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &anyhow::Error) -> ExitCode {
    // Error types that embed their source in their own message would repeat
    // it in a full chain, so a cause already spelled out is skipped.
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    eprintln!("olakit: {message}");
    ExitCode::from(exit_code(e))
}

/// Maps the first recognized error in the chain to an exit code.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<olakit::Error>() {
            return match err {
                olakit::Error::Io(_) => 2,
                olakit::Error::Frozen { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn exit_codes_follow_error_kind() {
        let io = anyhow::Error::new(olakit::Error::Io(std::io::Error::other("x"))).context("reading");
        assert_eq!(exit_code(&io), 2);
        let frozen = anyhow::Error::new(olakit::Error::Frozen {
            before: "a".into(),
            after: "b".into(),
        });
        assert_eq!(exit_code(&frozen), 3);
        let order = anyhow::Error::new(olakit::Error::OrderOutOfRange { order: 9, layers: 2 });
        assert_eq!(exit_code(&order), 1);
        assert_eq!(exit_code(&anyhow::Error::new(std::io::Error::other("y"))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
