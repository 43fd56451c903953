use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use pmpd::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = format!("{:?}", cli.command);
    let name = name.split(['(', ' ']).next().unwrap_or("command").to_lowercase();
    match run(cli).with_context(|| format!("{name} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<pmpd::Error>().map_or(2, pmpd::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
