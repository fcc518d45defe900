//! `vbci` command-line entry point.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when the inputs cannot
//! be read or fail validation. The effective configuration is echoed to
//! standard error as one JSON line before any work starts.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

fn run(cli: &Cli) -> Result<(), commands::CliError> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Replay(a) => commands::replay(a),
        Command::Evaluate(a) => commands::evaluate(a, cli.seed),
        Command::Permtest(a) => commands::permtest(a, cli.seed),
        Command::Topo(a) => commands::topo(a),
        Command::Serve(a) => {
            tracing_subscriber::fmt().with_writer(std::io::stderr).init();
            commands::serve(a, cli.seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    eprintln!("{}", serde_json::to_string(&cli).expect("config serializes"));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
