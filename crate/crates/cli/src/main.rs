//! `ificl`: pretrain the toy model, run federated experiments, compare
//! global and local coefficients, and serve cached tasks.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ificl_core::experiment::{
    compare_local_global, compare_table, parse_requests, pretrain_from_manifest, run_experiment, serve_requests,
    with_threads, ExperimentReport, Manifest, RunOptions,
};
use ificl_core::nn::{load_checkpoint, save_checkpoint, ToyTransformer};
use ificl_core::store::TaskStore;

#[derive(Debug, Parser)]
#[command(name = "ificl", version, about = "Federated in-context learning by residual-stream injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the toy model and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Run every method in the manifest and write a JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print per-round global versus local accuracy from a report.
    Compare {
        #[arg(long)]
        report: PathBuf,
    },
    /// Answer a file of task requests through the task store.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Store directory, created if missing.
        #[arg(long)]
        store: PathBuf,
        /// One JSON request per line.
        #[arg(long)]
        requests: PathBuf,
        /// Outcome stream to append to; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn load_manifest(path: &Path, seed: Option<u64>) -> Result<Manifest> {
    let mut manifest = Manifest::load(path)?;
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    Ok(manifest)
}

fn load_model(path: &Path) -> Result<Arc<ToyTransformer>> {
    let model = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Arc::new(model))
}

fn pretrain_cmd(config: &Path, checkpoint: &Path, seed: Option<u64>, threads: usize) -> Result<()> {
    let mut manifest = Manifest::load(config)?;
    if let Some(seed) = seed {
        manifest.pretrain.seed = seed;
    }
    let (model, summary) = with_threads(threads, || pretrain_from_manifest(&manifest))??;
    save_checkpoint(&model, checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    let r = &summary.report;
    if r.heldout_loss.is_some_and(|l| l >= r.uniform_baseline) {
        log::warn!("held-out loss is not below the uniform baseline");
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run_cmd(config: &Path, checkpoint: &Path, report: &Path, seed: Option<u64>, threads: usize) -> Result<()> {
    let manifest = load_manifest(config, seed)?;
    let model = load_model(checkpoint)?;
    let outcome = run_experiment(model, &manifest, RunOptions { threads, capture: false })?;
    outcome
        .report
        .save(report)
        .with_context(|| format!("writing {}", report.display()))?;
    let mut out = io::stdout().lock();
    for (method, result) in &outcome.report.methods {
        writeln!(
            out,
            "{:<22} acc {:.4}  macro-F1 {:.4}  {:.2}s",
            method.name(),
            result.metrics.accuracy,
            result.metrics.macro_f1,
            result.seconds
        )?;
    }
    writeln!(out, "total traffic {} bytes", outcome.report.communication.total_bytes)?;
    Ok(())
}

fn compare_cmd(report: &Path) -> Result<()> {
    let report = ExperimentReport::load(report).with_context(|| format!("reading {}", report.display()))?;
    let rows = compare_local_global(&report)?;
    print!("{}", compare_table(&rows));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve_cmd(
    config: &Path,
    checkpoint: &Path,
    store: &Path,
    requests: &Path,
    report: Option<&Path>,
    seed: Option<u64>,
    threads: usize,
) -> Result<()> {
    let manifest = load_manifest(config, seed)?;
    let model = load_model(checkpoint)?;
    let text = std::fs::read_to_string(requests).with_context(|| format!("reading {}", requests.display()))?;
    let requests = parse_requests(&text);
    let mut store = TaskStore::open(store, model.fingerprint())?;
    let mut out: Box<dyn Write + Send> = match report {
        Some(path) => Box::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?,
        ),
        None => Box::new(io::stdout()),
    };
    let outcomes = with_threads(threads, || serve_requests(&model, &manifest, &mut store, &requests, &mut out))??;
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} requests failed", outcomes.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IFICL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain {
            config,
            checkpoint,
            seed,
            threads,
        } => pretrain_cmd(config, checkpoint, *seed, *threads),
        Command::Run {
            config,
            checkpoint,
            report,
            seed,
            threads,
        } => run_cmd(config, checkpoint, report, *seed, *threads),
        Command::Compare { report } => compare_cmd(report),
        Command::Serve {
            config,
            checkpoint,
            store,
            requests,
            report,
            seed,
            threads,
        } => serve_cmd(config, checkpoint, store, requests, report.as_deref(), *seed, *threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
