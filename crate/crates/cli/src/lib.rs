//! The `kinevae` command: data preparation, label augmentation, training,
//! generation, evaluation and the labeling service behind one binary.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use kinevae_core::training::TrainError;

use crate::args::{Cli, Command};
use crate::commands::Outcome;
use crate::config::{env_overrides, Config, Layers};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Resolve the configuration for `cli` against the given environment.
pub fn resolve_config<I>(cli: &Cli, env: I) -> Result<Config>
where
    I: IntoIterator<Item = (String, String)>,
{
    Config::load(&Layers {
        file: cli.global.config.clone(),
        env: env_overrides(env),
        flags: cli.overrides()?,
    })
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(cli, std::env::vars())?;
    if cli.global.reproducible {
        // Parallel reductions are already order-fixed; one thread removes any doubt.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Augment(a) => commands::augment(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Generate(a) => commands::generate_cmd(&cfg, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&cfg, a),
        Command::Serve(a) => commands::serve(&cfg, a, cli.global.json),
        Command::Toy(_) => commands::toy(&cfg),
    }
}

pub fn main_with<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();

    match run(&cli) {
        Ok(out) => {
            if cli.global.json {
                println!("{}", out.summary);
            } else if !cli.global.quiet {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            if cli.global.json {
                println!("{}", serde_json::json!({"error": format!("{e:#}"), "exit_code": code}));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
