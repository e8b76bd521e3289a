use std::process::ExitCode;

use clap::Parser;
use horse_edit::{exit_code, log_level, run, Cli};

fn main() -> ExitCode {
    let level = match log_level(std::env::var("HORSE_EDIT_LOG").ok().as_deref()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
