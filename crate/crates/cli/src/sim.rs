use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{bail, Result};
use crossprobe_core::{BrowserFamily, Region};
use crossprobe_net::fetch::{HttpFetcher, Resolution, Resolver};
use crossprobe_net::simclient::{ClientIdentity, SimClient};
use serde_json::json;
use url::Url;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    coordinator: Url,
    #[arg(long)]
    collector: Url,
    /// Region the clients claim; honoured only by services that trust test headers.
    #[arg(long, default_value = "ZZ")]
    region: Region,
    /// chrome, firefox, safari or other.
    #[arg(long, default_value = "chrome")]
    browser: BrowserFamily,
    /// Number of client visits to simulate.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Referer sent with every request.
    #[arg(long)]
    origin: Option<String>,
    /// Send target requests for HOST to ADDR instead of resolving it.
    #[arg(long = "resolve", value_name = "HOST=ADDR", value_parser = parse_override)]
    overrides: Vec<(String, SocketAddr)>,
}

fn parse_override(raw: &str) -> Result<(String, SocketAddr), String> {
    let (host, addr) = raw.split_once('=').ok_or("expected HOST=ADDR")?;
    let addr = addr.parse().map_err(|e| format!("{addr}: {e}"))?;
    Ok((host.to_ascii_lowercase(), addr))
}

struct StaticResolver(HashMap<String, SocketAddr>);

impl Resolver for StaticResolver {
    fn resolve(&self, url: &Url) -> Resolution {
        url.host_str()
            .and_then(|h| self.0.get(h))
            .map_or(Resolution::System, |a| Resolution::Addr(*a))
    }
}

pub async fn run(args: Args) -> Result<()> {
    let resolver = Arc::new(StaticResolver(args.overrides.into_iter().collect()));
    let targets = HttpFetcher::new(resolver);
    let mut failures = 0;
    for i in 0..args.count {
        let identity = ClientIdentity {
            region: args.region,
            browser: args.browser,
            client_id: format!("sim-{}-{i}", args.seed),
            origin: args.origin.clone(),
        };
        let seed = args.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let mut client = SimClient::new(
            args.coordinator.clone(),
            args.collector.clone(),
            identity,
            HttpFetcher::default(),
            targets.clone(),
            seed,
        );
        match client.run_once().await {
            Ok(run) => {
                let task = run.descriptor.task();
                let line = json!({
                    "client": i,
                    "taskType": task.map(|t| t.task_type),
                    "resourceUrl": task.map(|t| t.resource_url.as_str()),
                    "submissions": run.submissions.iter().map(|s| json!({
                        "id": s.id,
                        "state": s.state,
                        "elapsedMs": s.elapsed_ms,
                    })).collect::<Vec<_>>(),
                });
                println!("{line}");
            }
            Err(e) => {
                failures += 1;
                tracing::error!(client = i, error = %e, "visit failed");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} visits failed", args.count);
    }
    Ok(())
}
