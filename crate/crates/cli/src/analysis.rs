use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use crossprobe_core::collect::{aggregate as aggregate_results, filter_automation, AggregateConfig, AutomationFilter};
use crossprobe_core::detector::Detector;
use crossprobe_core::schedule::{task_index, Assignment};
use crossprobe_core::{DetectionConfig, RegionStats};
use crossprobe_net::collector::read_records;
use serde_json::json;

use crate::{read_jsonl, write_json, write_jsonl};

#[derive(clap::Args)]
pub struct DetectArgs {
    /// Region stats, one JSON object per line.
    #[arg(long)]
    stats: PathBuf,
    /// Success probability of an unfiltered measurement.
    #[arg(long, default_value_t = 0.7)]
    p: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Regions with fewer measurements are not tested.
    #[arg(long, default_value_t = 5)]
    min_samples: u64,
    /// Verdict file, `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

pub fn detect(args: DetectArgs) -> Result<()> {
    let stats: Vec<RegionStats> = read_jsonl(&args.stats)?;
    let detector = Detector::new(DetectionConfig {
        p: args.p,
        alpha: args.alpha,
        min_samples: args.min_samples,
    })?;
    let verdicts = detector.detect_all(&stats);
    let flagged = verdicts.iter().filter(|v| v.flagged).count();
    write_json(&args.out, &serde_json::to_value(&verdicts)?)?;
    tracing::info!(verdicts = verdicts.len(), flagged, "detection done");
    Ok(())
}

#[derive(clap::Args)]
pub struct AggregateArgs {
    /// Record log written by `collector serve` or fetched from /export.
    #[arg(long)]
    records: PathBuf,
    /// Assignment log written by the coordinator.
    #[arg(long)]
    assignments: PathBuf,
    /// Region stats output, `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
    /// Seconds after which an unanswered measurement times out.
    #[arg(long, default_value_t = 120)]
    timeout_secs: i64,
    /// Evaluate timeouts as of this instant (RFC 3339) instead of now.
    #[arg(long)]
    now: Option<DateTime<Utc>>,
    /// Keep records from automated agents and over-active clients.
    #[arg(long)]
    keep_automation: bool,
    /// Also write aggregation diagnostics here as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

pub fn aggregate(args: AggregateArgs) -> Result<()> {
    let file = File::open(&args.records).with_context(|| format!("opening {}", args.records.display()))?;
    let (mut records, skipped) = read_records(BufReader::new(file))?;
    if !args.keep_automation {
        records = filter_automation(&records, &AutomationFilter::default());
    }
    let assignments: Vec<Assignment> = read_jsonl(&args.assignments)?;
    let index = task_index(&assignments);
    let results: Vec<_> = records.iter().map(|r| r.to_result()).collect();
    let cfg = AggregateConfig {
        timeout_secs: args.timeout_secs,
    };
    let agg = aggregate_results(&results, &index, &cfg, args.now.unwrap_or_else(Utc::now));
    write_jsonl(&args.out, &agg.stats)?;
    if let Some(path) = &args.diagnostics {
        write_json(
            path,
            &json!({ "skippedLines": skipped, "aggregation": agg.diagnostics }),
        )?;
    }
    tracing::info!(records = records.len(), skipped, stats = agg.stats.len(), diagnostics = ?agg.diagnostics, "aggregation done");
    Ok(())
}
