//! Headless client: fetches a task, runs it with each task type's success
//! semantics and reports through the submission protocol.

use std::collections::HashSet;
use std::sync::LazyLock;

use crossprobe_core::collect::Submission;
use crossprobe_core::{
    canonicalize_resource_key, BrowserFamily, MeasurementTask, Region, ResultState, TaskDescriptor, TaskType,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;
use url::Url;
use uuid::Uuid;

use crate::fetch::{FetchError, FetchRequest, FetchResponse, Fetcher};
use crate::{HEADER_TEST_CLIENT, HEADER_TEST_REGION};

pub const CHROME_UA: &str =
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0.0.0 Safari/537.36";
pub const FIREFOX_UA: &str = "Mozilla/5.0 (X11; Linux x86_64; rv:125.0) Gecko/20100101 Firefox/125.0";
pub const SAFARI_UA: &str =
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 14_4) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.4 Safari/605.1.15";
pub const OTHER_UA: &str = "Mozilla/5.0 (compatible; ExampleBrowser/1.0)";

pub fn user_agent(browser: BrowserFamily) -> &'static str {
    match browser {
        BrowserFamily::Chrome => CHROME_UA,
        BrowserFamily::Firefox => FIREFOX_UA,
        BrowserFamily::Safari => SAFARI_UA,
        BrowserFamily::Other => OTHER_UA,
    }
}

/// Magic-byte check plus enough header decoding to reject truncated or
/// zero-sized images. Recognizes GIF, PNG, JPEG and ICO.
pub fn looks_like_image(body: &[u8]) -> bool {
    let u16le = |i: usize| body.get(i..i + 2).map(|b| u16::from_le_bytes([b[0], b[1]]));
    let u32be = |i: usize| body.get(i..i + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]));
    if body.starts_with(b"GIF87a") || body.starts_with(b"GIF89a") {
        return matches!((u16le(6), u16le(8)), (Some(w), Some(h)) if w > 0 && h > 0);
    }
    if body.starts_with(b"\x89PNG\r\n\x1a\n") {
        return body.get(12..16) == Some(b"IHDR")
            && matches!((u32be(16), u32be(20)), (Some(w), Some(h)) if w > 0 && h > 0);
    }
    if body.starts_with(&[0xFF, 0xD8, 0xFF]) {
        return body.len() > 4 && body.ends_with(&[0xFF, 0xD9]);
    }
    if body.starts_with(&[0, 0, 1, 0]) {
        // ICONDIR: reserved, type 1, image count, then 16-byte entries.
        return matches!(u16le(4), Some(n) if n > 0) && body.len() >= 6 + 16;
    }
    false
}

static SUBRESOURCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)<(?:img|script|link|iframe)\b[^>]*?\b(?:src|href)\s*=\s*["']([^"']+)["']"#).unwrap()
});

fn subresources(page: &Url, html: &str) -> Vec<Url> {
    SUBRESOURCE
        .captures_iter(html)
        .filter_map(|c| page.join(&c[1]).ok())
        .filter(|u| matches!(u.scheme(), "http" | "https"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub state: ResultState,
    pub elapsed_ms: Option<u64>,
}

impl Outcome {
    fn of(success: bool) -> Self {
        Self {
            state: if success {
                ResultState::Success
            } else {
                ResultState::Failure
            },
            elapsed_ms: None,
        }
    }
}

/// Timing model for the simulated cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingModel {
    /// Hits report a duration in `[1, hit_max_ms)`.
    pub hit_max_ms: u64,
    /// Misses report at least this much.
    pub miss_baseline_ms: u64,
    pub miss_jitter_ms: u64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            hit_max_ms: 10,
            miss_baseline_ms: 120,
            miss_jitter_ms: 80,
        }
    }
}

/// Per-run cache keyed by canonical URL, admitting only cacheable 200s.
#[derive(Debug, Default)]
struct SimCache(HashSet<String>);

impl SimCache {
    fn admit(&mut self, resp: &FetchResponse) {
        if resp.status == 200 && resp.is_cacheable() {
            if let Ok(k) = canonicalize_resource_key(resp.url.as_str()) {
                self.0.insert(k);
            }
        }
    }

    fn contains(&self, url: &str) -> bool {
        canonicalize_resource_key(url).is_ok_and(|k| self.0.contains(&k))
    }
}

async fn get<F: Fetcher>(fetcher: &F, url: &str, ua: &str) -> Result<FetchResponse, FetchError> {
    let url = Url::parse(url).map_err(|_| FetchError::BadUrl(url.to_string()))?;
    fetcher.fetch(FetchRequest::get(url).header("User-Agent", ua)).await
}

/// Runs one task. Transport failures map to `Failure` with no timing.
pub async fn execute_task<F: Fetcher>(
    task: &MeasurementTask,
    fetcher: &F,
    ua: &str,
    timing: &TimingModel,
    rng: &mut ChaCha8Rng,
) -> Outcome {
    match task.task_type {
        TaskType::Image => {
            let ok = get(fetcher, &task.resource_url, ua)
                .await
                .is_ok_and(|r| r.status == 200 && looks_like_image(&r.body));
            Outcome::of(ok)
        }
        TaskType::StyleSheet => {
            let Some(probe) = &task.style_probe else {
                return Outcome::of(false);
            };
            let ok = get(fetcher, &task.resource_url, ua).await.is_ok_and(|r| {
                r.status == 200
                    && std::str::from_utf8(&r.body).is_ok_and(|css| crossprobe_core::css::applies_probe(css, probe))
            });
            Outcome::of(ok)
        }
        TaskType::Script => {
            let ok = get(fetcher, &task.resource_url, ua)
                .await
                .is_ok_and(|r| r.status == 200);
            Outcome::of(ok)
        }
        TaskType::InlineFrame => run_inline_frame(task, fetcher, ua, timing, rng).await,
    }
}

async fn run_inline_frame<F: Fetcher>(
    task: &MeasurementTask,
    fetcher: &F,
    ua: &str,
    timing: &TimingModel,
    rng: &mut ChaCha8Rng,
) -> Outcome {
    let Some(page_url) = &task.page_url else {
        return Outcome::of(false);
    };
    let mut cache = SimCache::default();
    if let Ok(page) = get(fetcher, page_url, ua).await {
        cache.admit(&page);
        let is_html = page.header("content-type").is_some_and(|ct| ct.contains("html"));
        if page.status == 200 && is_html {
            let html = String::from_utf8_lossy(&page.body);
            for sub in subresources(&page.url, &html) {
                if let Ok(resp) = fetcher.fetch(FetchRequest::get(sub).header("User-Agent", ua)).await {
                    cache.admit(&resp);
                }
            }
        }
    }
    if cache.contains(&task.resource_url) {
        return Outcome {
            state: ResultState::Success,
            elapsed_ms: Some(rng.random_range(1..timing.hit_max_ms.max(2))),
        };
    }
    match get(fetcher, &task.resource_url, ua).await {
        Ok(_) => Outcome {
            state: ResultState::Failure,
            elapsed_ms: Some(timing.miss_baseline_ms + rng.random_range(0..=timing.miss_jitter_ms)),
        },
        Err(_) => Outcome::of(false),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientIdentity {
    pub region: Region,
    pub browser: BrowserFamily,
    pub client_id: String,
    /// Sent as Referer to emulate the embedding page.
    pub origin: Option<String>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("coordinator unreachable: {0}")]
    Coordinator(FetchError),
    #[error("coordinator answered {0}")]
    CoordinatorStatus(u16),
    #[error("malformed task descriptor: {0}")]
    Descriptor(String),
    #[error("collector unreachable: {0}")]
    Collector(FetchError),
    #[error("collector rejected submission with {0}")]
    Rejected(u16),
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub descriptor: TaskDescriptor,
    /// Submissions in the order they were sent.
    pub submissions: Vec<Submission>,
}

/// One simulated visitor. `S` talks to the services, `T` to targets.
pub struct SimClient<S, T> {
    coordinator: Url,
    collector: Url,
    identity: ClientIdentity,
    services: S,
    targets: T,
    timing: TimingModel,
    rng: ChaCha8Rng,
}

impl<S: Fetcher, T: Fetcher> SimClient<S, T> {
    pub fn new(coordinator: Url, collector: Url, identity: ClientIdentity, services: S, targets: T, seed: u64) -> Self {
        Self {
            coordinator,
            collector,
            identity,
            services,
            targets,
            timing: TimingModel::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_timing(mut self, timing: TimingModel) -> Self {
        self.timing = timing;
        self
    }

    pub fn identity(&self) -> &ClientIdentity {
        &self.identity
    }

    fn request(&self, url: Url) -> FetchRequest {
        let mut req = FetchRequest::get(url)
            .header("User-Agent", user_agent(self.identity.browser))
            .header(HEADER_TEST_REGION, self.identity.region.as_str())
            .header(HEADER_TEST_CLIENT, self.identity.client_id.as_str());
        if let Some(origin) = &self.identity.origin {
            req = req.header("Referer", origin.as_str());
        }
        req
    }

    async fn submit(&self, submission: Submission, log: &mut Vec<Submission>) -> Result<(), SimError> {
        let url = self
            .collector
            .join(&submission.to_query_path())
            .map_err(|e| SimError::Collector(FetchError::BadUrl(e.to_string())))?;
        let resp = self
            .services
            .fetch(self.request(url))
            .await
            .map_err(SimError::Collector)?;
        if resp.status != 204 {
            return Err(SimError::Rejected(resp.status));
        }
        log.push(submission);
        Ok(())
    }

    pub async fn fetch_task(&self) -> Result<TaskDescriptor, SimError> {
        let url = self
            .coordinator
            .join("/task.json")
            .map_err(|e| SimError::Coordinator(FetchError::BadUrl(e.to_string())))?;
        let resp = self
            .services
            .fetch(self.request(url))
            .await
            .map_err(SimError::Coordinator)?;
        if resp.status != 200 {
            return Err(SimError::CoordinatorStatus(resp.status));
        }
        let body = std::str::from_utf8(&resp.body).map_err(|e| SimError::Descriptor(e.to_string()))?;
        TaskDescriptor::from_json(body).map_err(|e| SimError::Descriptor(e.to_string()))
    }

    /// Fetch a task, submit init, run it, submit the outcome. A noop gets
    /// an init under a locally minted ID and nothing else.
    pub async fn run_once(&mut self) -> Result<RunRecord, SimError> {
        let descriptor = self.fetch_task().await?;
        let mut submissions = Vec::with_capacity(2);
        let id = match descriptor.task() {
            Some(t) => t.measurement_id,
            None => seeded_uuid(&mut self.rng),
        };
        let init = Submission {
            id,
            state: ResultState::Init,
            elapsed_ms: None,
        };
        self.submit(init, &mut submissions).await?;
        if let Some(task) = descriptor.task() {
            let ua = user_agent(self.identity.browser);
            let outcome = execute_task(task, &self.targets, ua, &self.timing, &mut self.rng).await;
            let terminal = Submission {
                id,
                state: outcome.state,
                elapsed_ms: outcome.elapsed_ms,
            };
            self.submit(terminal, &mut submissions).await?;
        }
        Ok(RunRecord {
            descriptor,
            submissions,
        })
    }
}

/// A fresh random v4 ID from a seeded generator.
pub fn seeded_uuid(rng: &mut impl Rng) -> Uuid {
    uuid::Builder::from_random_bytes(rng.random()).into_uuid()
}
