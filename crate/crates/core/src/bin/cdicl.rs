use std::io;
use std::process::ExitCode;

use clap::Parser;

use cdicl::cli::{run, Cli, Status};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout();
    match run(&cli, &mut input, &mut out) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Violations) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
