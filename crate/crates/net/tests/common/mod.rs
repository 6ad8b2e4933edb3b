#![allow(dead_code)]

use std::sync::Arc;

use crossprobe_core::schedule::{ScheduleConfig, Scheduler};
use crossprobe_core::{MeasurementTask, Region};
use crossprobe_net::collector::{Collector, CollectorConfig, RecordStore};
use crossprobe_net::coordinator::{Coordinator, CoordinatorConfig};
use crossprobe_net::fetch::{FetchRequest, FetchResponse, Fetcher, HttpFetcher};
use crossprobe_net::geo::FixedGeo;
use crossprobe_net::{Clock, ContextSource, ServerHandle, SystemClock};
use url::Url;

pub const EXPORT_TOKEN: &str = "test-export-token";

pub fn trusted_context() -> ContextSource {
    let mut ctx = ContextSource::new(Arc::new(FixedGeo(Region::UNKNOWN)));
    ctx.trust_test_headers = true;
    ctx.salt = "test".into();
    ctx
}

/// Coordinator and collector on loopback, trusting test headers.
pub struct Platform {
    pub coordinator: Arc<Coordinator>,
    pub collector: Arc<Collector>,
    pub coordinator_server: ServerHandle,
    pub collector_server: ServerHandle,
}

impl Platform {
    pub async fn start(tasks: Vec<MeasurementTask>, schedule: ScheduleConfig) -> Self {
        Self::start_with_clock(tasks, schedule, Arc::new(SystemClock)).await
    }

    pub async fn start_with_clock(
        tasks: Vec<MeasurementTask>,
        schedule: ScheduleConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let collector = Collector::new(
            RecordStore::in_memory(),
            trusted_context(),
            clock.clone(),
            CollectorConfig {
                export_token: Some(EXPORT_TOKEN.into()),
            },
        );
        let collector_server = ServerHandle::spawn_local(collector.router()).await.unwrap();
        let scheduler = Scheduler::new(tasks, schedule).unwrap();
        let coordinator = Coordinator::new(
            scheduler,
            trusted_context(),
            clock,
            CoordinatorConfig {
                collector_url: collector_server.url().to_string(),
                runner_bundle: Some(b"/* runner */".to_vec()),
                ..Default::default()
            },
        )
        .unwrap();
        let coordinator_server = ServerHandle::spawn_local(coordinator.router()).await.unwrap();
        Self {
            coordinator,
            collector,
            coordinator_server,
            collector_server,
        }
    }

    pub fn coordinator_url(&self) -> Url {
        self.coordinator_server.url()
    }

    pub fn collector_url(&self) -> Url {
        self.collector_server.url()
    }
}

pub async fn get(url: Url, headers: &[(&str, &str)]) -> FetchResponse {
    let mut req = FetchRequest::get(url);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    HttpFetcher::default().fetch(req).await.expect("request succeeds")
}
