mod analysis;
mod serve;
mod sim;
mod taskgen;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "crossprobe", version, about = "Cross-origin filtering measurement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build measurement tasks from HAR recordings of target pages.
    Taskgen(taskgen::Args),
    /// Run the per-region binomial test over aggregated stats.
    Detect(analysis::DetectArgs),
    /// Serve measurement tasks.
    Coordinator(serve::CoordinatorArgs),
    /// Result collection service and offline aggregation.
    #[command(subcommand)]
    Collector(CollectorCommand),
    /// Serve control assets behind emulated filtering.
    Testbed(serve::TestbedArgs),
    /// Run simulated clients against a coordinator and collector.
    Simclient(sim::Args),
}

#[derive(Subcommand)]
enum CollectorCommand {
    /// Accept submissions and append them to a record log.
    Serve(serve::CollectorArgs),
    /// Turn a record log and an assignment log into per-region stats.
    Aggregate(analysis::AggregateArgs),
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Taskgen(args) => taskgen::run(args),
        Command::Detect(args) => analysis::detect(args),
        Command::Collector(CollectorCommand::Aggregate(args)) => analysis::aggregate(args),
        Command::Coordinator(args) => runtime()?.block_on(serve::coordinator(args)),
        Command::Collector(CollectorCommand::Serve(args)) => runtime()?.block_on(serve::collector(args)),
        Command::Testbed(args) => runtime()?.block_on(serve::testbed(args)),
        Command::Simclient(args) => runtime()?.block_on(sim::run(args)),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

/// Reads one JSON value per non-blank line.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `-` means stdout.
pub(crate) fn create(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(std::io::stdout().lock())));
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

pub(crate) fn read_to_string(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
