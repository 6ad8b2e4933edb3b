use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use crossprobe_core::har::{ingest_har, HarDocument};
use crossprobe_core::taskgen::{expand_pattern, feasibility_stats, generate_tasks, TaskGenLimits, UrlCorpus};
use crossprobe_core::{canonicalize_resource_key, TargetPattern};

use crate::{create, read_to_string, write_jsonl};

#[derive(clap::Args)]
pub struct Args {
    /// Target list: `=URL`, `D host` or `P prefix` per line.
    #[arg(long)]
    targets: PathBuf,
    /// Directory of `.har` recordings.
    #[arg(long)]
    har_dir: PathBuf,
    /// URL corpus that domain and prefix patterns are expanded against.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for tasks.jsonl and feasibility.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_patterns(args: &Args) -> Result<Vec<TargetPattern>> {
    let text = read_to_string(&args.targets)?;
    let mut patterns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(p) = TargetPattern::parse_line(line) {
            patterns.push(p.with_context(|| format!("{}:{}", args.targets.display(), i + 1))?);
        }
    }
    Ok(patterns)
}

/// Every recorded page keyed by its canonical URL; the first recording wins.
fn load_recordings(dir: &PathBuf) -> Result<BTreeMap<String, HarDocument>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("har")))
        .collect();
    paths.sort();
    let mut pages = BTreeMap::new();
    for path in paths {
        let raw = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let docs = match ingest_har(&raw) {
            Ok(d) => d,
            Err(e) => {
                tracing::warn!(file = %path.display(), error = %e, "skipping unreadable HAR");
                continue;
            }
        };
        for doc in docs {
            match canonicalize_resource_key(doc.page_url()) {
                Ok(key) => {
                    pages.entry(key).or_insert(doc);
                }
                Err(e) => tracing::warn!(page = doc.page_url(), error = %e, "skipping page"),
            }
        }
    }
    Ok(pages)
}

pub fn run(args: Args) -> Result<()> {
    let limits = TaskGenLimits::default();
    limits.validate()?;
    let patterns = load_patterns(&args)?;
    let corpus = UrlCorpus::from_lines(&read_to_string(&args.corpus)?)?;
    let recordings = load_recordings(&args.har_dir)?;
    if recordings.is_empty() {
        bail!("no pages recorded under {}", args.har_dir.display());
    }

    let mut selected = Vec::new();
    let mut seen = HashSet::new();
    let mut unrecorded = 0;
    for pattern in &patterns {
        let expansion = expand_pattern(pattern, &corpus, &limits, args.seed);
        for url in expansion.urls {
            let key = canonicalize_resource_key(&url)?;
            match recordings.get(&key) {
                Some(doc) if seen.insert(key) => selected.push(doc),
                Some(_) => {}
                None => {
                    unrecorded += 1;
                    tracing::warn!(%url, "no HAR recording for target");
                }
            }
        }
    }

    let tasks: Vec<_> = selected.iter().flat_map(|doc| generate_tasks(doc, &limits)).collect();
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&args.out.join("tasks.jsonl"), &tasks)?;
    let docs: Vec<HarDocument> = recordings.values().cloned().collect();
    feasibility_stats(&docs, &limits).write_csv(create(&args.out.join("feasibility.csv"))?)?;
    tracing::info!(
        patterns = patterns.len(),
        pages = selected.len(),
        unrecorded,
        tasks = tasks.len(),
        "task generation done"
    );
    Ok(())
}
