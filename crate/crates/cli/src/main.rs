//! `abltx`: command-line front end. Exit codes: 0 success, 2 input or
//! contract error, 3 IO error.

mod args;
mod commands;
mod config;
mod logging;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use log::Level;
use serde_json::json;

use abltx_core::{Error, Result};
use args::{Cli, Command};
use commands::Ctx;

fn parse() -> std::result::Result<Cli, ExitCode> {
    let cmd = Cli::command();
    let argv = match config::apply_config(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(e.exit_code() as u8));
        }
    };
    let parsed = cmd
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m));
    parsed.map_err(|e| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 2 } else { 0 })
    })
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    }
    let ctx = Ctx {
        chunk_bytes: cli.global.chunk_bytes.max(1),
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Forward(a) => commands::forward(a),
        Command::Diff(a) => commands::diff(a, &ctx),
        Command::Stats(a) => commands::stats(a),
        Command::Weightdiff(a) => commands::weightdiff(a, &ctx),
        Command::Ccdf(a) => commands::ccdf_cmd(a),
        Command::Mask(a) => commands::mask(a),
        Command::Union(a) => commands::union(a),
        Command::Overlap(a) => commands::overlap(a),
        Command::Merge(a) => commands::merge_cmd(a, &ctx),
        Command::Recovery(a) => commands::recovery(a),
    }
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    logging::init(cli.global.log_level);
    logging::event(
        Level::Info,
        "config",
        serde_json::to_value(&cli).unwrap_or_default(),
    );
    match run(&cli) {
        Ok(summary) => {
            logging::event(Level::Info, "done", summary.clone());
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            logging::event(
                Level::Error,
                "failed",
                json!({ "error": e.to_string(), "exit_code": e.exit_code() }),
            );
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
