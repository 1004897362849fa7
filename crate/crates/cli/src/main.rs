//! `denomae` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error (including a checkpoint
//! that does not match the configuration), 3 data error, 4 numeric abort,
//! 5 I/O error. Failures also print one JSON line on stderr with the error
//! category and message. `DENOMAE_THREADS` caps the worker pool.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;
use denomae::pipeline::ErrorCategory;

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Io => 5,
    }
}

fn category_name(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::Config => "config",
        ErrorCategory::Data => "data",
        ErrorCategory::Numeric => "numeric",
        ErrorCategory::Io => "io",
    }
}

fn fail(c: ErrorCategory, message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": category_name(c), "message": message }));
    ExitCode::from(exit_code(c))
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DENOMAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DENOMAE_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    if let Err(msg) = configure_threads() {
        return fail(ErrorCategory::Config, msg);
    }
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.category(), e.to_string()),
    }
}
