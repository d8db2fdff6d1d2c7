use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Run;
use config::RunConfig;

/// Multi-exit classifier experiments under distribution shift.
#[derive(Parser)]
#[command(name = "exitbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-exit model and write its checkpoint and epoch log.
    Train(Common),
    /// Write the clean and corrupted evaluation splits.
    Corrupt(Common),
    /// Run every split through all exits and write trace files.
    Trace(Common),
    /// Build per-exit neighbour indices from the training traces.
    KnnBuild(Common),
    /// Re-estimate batch-norm statistics on corrupted data.
    AdaptBn(Common),
    /// Apply the configured strategy and write a metrics report per split.
    Eval(Common),
    /// Sweep every strategy over its grid and write curve CSVs.
    Sweep(Common),
    /// Compare clean and corrupted results.
    Report(Common),
}

fn setup(common: &Common) -> Result<Run> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Run::new(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage): (&Common, fn(&Run) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Corrupt(c) => (c, commands::corrupt),
        Command::Trace(c) => (c, commands::trace),
        Command::KnnBuild(c) => (c, commands::knn_build),
        Command::AdaptBn(c) => (c, commands::adapt_bn),
        Command::Eval(c) => (c, commands::eval),
        Command::Sweep(c) => (c, commands::sweep_cmd),
        Command::Report(c) => (c, commands::report),
    };
    stage(&setup(common)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
