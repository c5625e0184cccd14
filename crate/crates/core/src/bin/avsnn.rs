use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use avsnn::cli::{error_json, run, Cli};

/// Exit code for malformed command lines.
const EXIT_USAGE: i32 = 64;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", json!({"error": {"kind": "usage", "message": e.kind().to_string()}}));
            std::process::exit(EXIT_USAGE);
        }
    };
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(1);
        }
    }
}
