use std::process::ExitCode;

use clap::Parser;
use vfmodel::commands;
use vfmodel::config::{Cli, RunConfig};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result =
        RunConfig::resolve(cli.command.args()).and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vfmodel {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
