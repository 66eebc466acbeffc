//! `pgnn`: run-file driven pipeline for physics-guided training, pruning and
//! evaluation of `dB_H/dt` forecasters.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Logs go to standard error; written file paths to standard output.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgAction, Parser, Subcommand};

use config::{ConfigError, InputError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "pgnn", version, about = "Physics-guided dB_H/dt forecasting pipeline")]
struct Cli {
    /// Run file (TOML). `compare` takes it once per run.
    #[arg(long, global = true, action = ArgAction::Append)]
    config: Vec<PathBuf>,
    /// Output directory, overriding `out_dir` in the run file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Debug-level logging.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic raw series (raw.csv, schema.toml).
    Synth,
    /// Repair gaps in data.raw and derive supervised rows.
    Ingest,
    /// Train a model with train.lambda.
    Train,
    /// Grid search over lambda, or alpha for a [prune] run.
    Search,
    /// Prune prune.base_model and fine-tune it.
    Prune,
    /// Metrics, noise sweep and trace of the run's model on the test rows.
    Eval,
    /// Comparison tables over several runs.
    Compare,
    /// Write the run's model as JSON.
    Export,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<InputError>().is_some() {
        return 3;
    }
    if let Some(e) = err.downcast_ref::<pgnn::Error>() {
        return match e {
            pgnn::Error::Config(_) | pgnn::Error::Pruning(_) => 2,
            pgnn::Error::Divergence { .. } | pgnn::Error::Numeric(_) => 4,
            _ => 3,
        };
    }
    3
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    if cli.config.is_empty() {
        return Err(ConfigError("--config is required".into()).into());
    }
    if cli.command != Command::Compare && cli.config.len() > 1 {
        return Err(ConfigError("--config may be given only once for this command".into()).into());
    }
    let mut runs = Vec::with_capacity(cli.config.len());
    for path in &cli.config {
        runs.push((path.clone(), RunConfig::load(path)?.with_seed(cli.seed)));
    }
    let cfg = &runs[0].1;
    let out = cli
        .out
        .clone()
        .or_else(|| (cli.command != Command::Compare).then(|| cfg.out_dir.clone()).flatten())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set out_dir".into()))?;
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Synth => commands::synth(cfg, &out),
        Command::Ingest => commands::ingest(cfg, &out),
        Command::Train => commands::train_cmd(cfg, &out),
        Command::Search => commands::search(cfg, &out),
        Command::Prune => commands::prune(cfg, &out),
        Command::Eval => commands::eval(cfg, &out),
        Command::Compare => {
            if runs.len() < 2 {
                return Err(ConfigError("compare needs at least two --config run files".into()).into());
            }
            commands::compare(&runs, &out)
        }
        Command::Export => commands::export(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
