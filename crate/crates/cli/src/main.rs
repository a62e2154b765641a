//! `roadtraj` — synthetic data, map matching, pre-training, fine-tuning and
//! evaluation from the command line. Every run writes `run.json` into its
//! output directory.

mod config;
mod gradcheck;
mod run;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = config::Cli::parse();
    match run::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
