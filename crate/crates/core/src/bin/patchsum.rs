use std::io;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use patchsum::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli, &mut io::stdout().lock());
    let code = exit_code(&result);
    if let Err(e) = result.with_context(|| format!("{} failed", cli.command.name())) {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(code)
}
