//! Batch driver for the recognition and parsing pipeline. Each subcommand
//! reads and writes only the files named by its flags, stamps a
//! `<output>.manifest.json` provenance record next to every output, and
//! exits 0 on success, 1 on validation or usage errors, and 2 on internal
//! errors. Reruns with identical inputs, config, and seed produce
//! byte-identical primary outputs.

mod cmd_discover;
mod cmd_evaluate;
mod cmd_hierarchy;
mod cmd_parse;
mod cmd_predict;
mod cmd_synth;
mod cmd_train;
mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::{Cfg, CliError};

#[derive(Parser)]
#[command(
    name = "mael",
    version,
    about = "Weakly supervised action recognition and temporal parsing over segment hierarchies"
)]
struct Cli {
    /// Config file (flat key=value lines or a JSON object); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for cross-video parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset plus a metadata sidecar.
    Synth(cmd_synth::SynthArgs),
    /// Prune, pool, and agglomerate each video into a segment tree.
    BuildHierarchy(cmd_hierarchy::BuildHierarchyArgs),
    /// Cluster segments into a per-action element vocabulary.
    DiscoverMaes(cmd_discover::DiscoverMaesArgs),
    /// Fit the joint scoring model with cutting-plane structural learning.
    Train(cmd_train::TrainArgs),
    /// Classify videos with a trained recognition model.
    Predict(cmd_predict::PredictArgs),
    /// Emit temporal detections from a trained parsing model or the
    /// sliding-window baseline.
    Parse(cmd_parse::ParseArgs),
    /// Score predictions or detections against ground truth.
    Evaluate(cmd_evaluate::EvaluateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> common::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(common::validation("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| common::internal(format!("cannot size the thread pool: {e}")))?;
    }
    let cfg = Cfg::load(cli.config.as_deref())?;

    let body = std::panic::AssertUnwindSafe(|| match cli.command {
        Command::Synth(args) => cmd_synth::run(args, &cfg),
        Command::BuildHierarchy(args) => cmd_hierarchy::run(args, &cfg),
        Command::DiscoverMaes(args) => cmd_discover::run(args, &cfg),
        Command::Train(args) => cmd_train::run(args, &cfg),
        Command::Predict(args) => cmd_predict::run(args, &cfg),
        Command::Parse(args) => cmd_parse::run(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate::run(args, &cfg),
    });
    match std::panic::catch_unwind(body) {
        Ok(result) => {
            result?;
            cfg.finish()
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            Err(common::internal(format!("unexpected failure: {msg}")))
        }
    }
}
