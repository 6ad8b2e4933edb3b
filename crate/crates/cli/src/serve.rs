use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use crossprobe_core::schedule::{ScheduleConfig, Scheduler};
use crossprobe_core::{MeasurementTask, Region};
use crossprobe_net::collector::{Collector, CollectorConfig, RecordStore};
use crossprobe_net::coordinator::{Coordinator, CoordinatorConfig};
use crossprobe_net::geo::{FixedGeo, GeoLookup, RangeGeo};
use crossprobe_net::testbed::{ModeMap, Testbed, TestbedConfig};
use crossprobe_net::{ContextSource, ServerHandle, SystemClock};
use tokio::net::TcpListener;

use crate::{read_jsonl, read_to_string};

#[derive(clap::Args)]
pub struct ContextArgs {
    /// IP range CSV (`start,end,CC`) used to place clients in regions.
    #[arg(long)]
    geo: Option<PathBuf>,
    /// Salt for hashing client addresses.
    #[arg(long, env = "CROSSPROBE_SALT", default_value = "", hide_env_values = true)]
    salt: String,
    /// Take region and client ID from X-Test-Region / X-Test-Client headers.
    /// For testbed runs only.
    #[arg(long)]
    trust_test_headers: bool,
}

impl ContextArgs {
    fn build(&self) -> Result<ContextSource> {
        let geo: Arc<dyn GeoLookup> = match &self.geo {
            Some(path) => {
                let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                Arc::new(RangeGeo::from_csv(f)?)
            }
            None => Arc::new(FixedGeo(Region::UNKNOWN)),
        };
        let mut ctx = ContextSource::new(geo);
        ctx.salt = self.salt.clone();
        ctx.trust_test_headers = self.trust_test_headers;
        Ok(ctx)
    }
}

async fn listen(addr: SocketAddr) -> Result<TcpListener> {
    TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))
}

async fn shutdown_signal() -> Result<()> {
    tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
    tracing::info!("shutting down");
    Ok(())
}

#[derive(clap::Args)]
pub struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Tasks as written by `taskgen`, one per line.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 60)]
    batch_window_secs: u64,
    /// Tasks one client may receive per batch window.
    #[arg(long, default_value_t = 1)]
    per_client_budget: u32,
    /// Base URL clients submit results to.
    #[arg(long, default_value = "http://127.0.0.1:8081")]
    collector_url: String,
    /// Browser runner bundle served at /runner.js.
    #[arg(long)]
    runner_bundle: Option<PathBuf>,
    /// Append issued assignments here, one JSON object per line.
    #[arg(long)]
    assignment_log: Option<PathBuf>,
    #[command(flatten)]
    context: ContextArgs,
}

pub async fn coordinator(args: CoordinatorArgs) -> Result<()> {
    let tasks: Vec<MeasurementTask> = read_jsonl(&args.tasks)?;
    let scheduler = Scheduler::new(
        tasks,
        ScheduleConfig {
            batch_window_secs: args.batch_window_secs,
            per_client_budget: args.per_client_budget,
        },
    )?;
    let runner_bundle = match &args.runner_bundle {
        Some(p) => Some(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = CoordinatorConfig {
        collector_url: args.collector_url,
        runner_bundle,
        assignment_log: args.assignment_log,
        ..CoordinatorConfig::default()
    };
    let coordinator = Coordinator::new(scheduler, args.context.build()?, Arc::new(SystemClock), cfg)?;
    let server = ServerHandle::spawn(listen(args.listen).await?, coordinator.router()).await?;
    tracing::info!(addr = %server.addr(), "coordinator listening");
    shutdown_signal().await
}

#[derive(clap::Args)]
pub struct CollectorArgs {
    #[arg(long, default_value = "127.0.0.1:8081")]
    listen: SocketAddr,
    /// Append-only record log.
    #[arg(long)]
    records: PathBuf,
    /// Bearer token enabling /export.
    #[arg(long, env = "CROSSPROBE_EXPORT_TOKEN", hide_env_values = true)]
    export_token: Option<String>,
    /// Seconds between record log compactions; 0 disables.
    #[arg(long, default_value_t = 3600)]
    compact_every_secs: u64,
    #[command(flatten)]
    context: ContextArgs,
}

pub async fn collector(args: CollectorArgs) -> Result<()> {
    let store = RecordStore::open(&args.records).with_context(|| format!("opening {}", args.records.display()))?;
    store.compact_file()?;
    let cfg = CollectorConfig {
        export_token: args.export_token.filter(|t| !t.is_empty()),
    };
    if cfg.export_token.is_none() {
        tracing::warn!("no export token set, /export is disabled");
    }
    let collector = Collector::new(store, args.context.build()?, Arc::new(SystemClock), cfg);
    let server = ServerHandle::spawn(listen(args.listen).await?, collector.router()).await?;
    tracing::info!(addr = %server.addr(), records = collector.store().len(), "collector listening");

    if args.compact_every_secs > 0 {
        let c = collector.clone();
        let every = Duration::from_secs(args.compact_every_secs);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Err(e) = c.store().compact_file() {
                    tracing::error!(error = %e, "compaction failed");
                }
            }
        });
    }
    shutdown_signal().await?;
    collector.store().compact_file()?;
    Ok(())
}

#[derive(clap::Args)]
pub struct TestbedArgs {
    /// Address of the emulated target site.
    #[arg(long, default_value = "127.0.0.1:8090")]
    listen: SocketAddr,
    /// Address of the block-page host; an ephemeral port by default.
    #[arg(long)]
    block_listen: Option<SocketAddr>,
    /// `<path> <mode>` lines. Without it every control asset is unfiltered.
    #[arg(long)]
    mode_map: Option<PathBuf>,
    /// Longest time a drop mode holds a connection.
    #[arg(long, default_value_t = 60)]
    hold_max_secs: u64,
}

pub async fn testbed(args: TestbedArgs) -> Result<()> {
    let map = match &args.mode_map {
        Some(p) => ModeMap::parse(&read_to_string(p)?)?,
        None => ModeMap::control(),
    };
    let block_addr = args.block_listen.unwrap_or(SocketAddr::new(args.listen.ip(), 0));
    let mut cfg = TestbedConfig::new(map);
    cfg.hold_max = Duration::from_secs(args.hold_max_secs);
    let tb = Testbed::start(listen(args.listen).await?, listen(block_addr).await?, cfg)?;
    for (path, mode) in tb.mode_map().iter() {
        tracing::info!(path, %mode, "filtering");
    }
    println!("target http://{}/", tb.target_addr());
    println!("block  http://{}/", tb.block_addr());
    shutdown_signal().await
}
