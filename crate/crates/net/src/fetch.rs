//! Minimal HTTP/1.1 GET client with a pluggable name-resolution hook.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Empty, Limited};
use hyper::header::{HeaderValue, CONNECTION, HOST, LOCATION, USER_AGENT};
use hyper_util::rt::TokioIo;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::net::TcpStream;
use url::Url;

/// Outcome of resolving the host of a URL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Addr(SocketAddr),
    NxDomain,
    /// Defer to the system resolver.
    System,
}

/// Resolution hook. Gets the whole URL so emulated filtering can be keyed
/// by path as well as host.
pub trait Resolver: Send + Sync {
    fn resolve(&self, url: &Url) -> Resolution;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemResolver;

impl Resolver for SystemResolver {
    fn resolve(&self, _url: &Url) -> Resolution {
        Resolution::System
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("cannot fetch {0:?}: unsupported url")]
    BadUrl(String),
    #[error("name resolution failed for {0}")]
    Resolve(String),
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("connection reset")]
    Reset,
    #[error("timed out")]
    Timeout,
    #[error("too many redirects")]
    TooManyRedirects,
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl FetchError {
    /// True for failures below HTTP: resolution, connect, reset, timeout.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            FetchError::Resolve(_) | FetchError::Connect(_) | FetchError::Reset | FetchError::Timeout
        )
    }
}

#[derive(Debug, Clone)]
pub struct FetchRequest {
    pub url: Url,
    pub headers: Vec<(String, String)>,
}

impl FetchRequest {
    pub fn get(url: Url) -> Self {
        Self {
            url,
            headers: Vec::new(),
        }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone)]
pub struct FetchResponse {
    /// URL of the final response after redirects.
    pub url: Url,
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl FetchResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_cacheable(&self) -> bool {
        crossprobe_core::har::is_cacheable(self.headers.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

pub trait Fetcher: Send + Sync {
    fn fetch(&self, req: FetchRequest) -> impl Future<Output = Result<FetchResponse, FetchError>> + Send;
}

impl<F: Fetcher> Fetcher for Arc<F> {
    fn fetch(&self, req: FetchRequest) -> impl Future<Output = Result<FetchResponse, FetchError>> + Send {
        (**self).fetch(req)
    }
}

#[derive(Clone)]
pub struct HttpFetcher {
    resolver: Arc<dyn Resolver>,
    timeout: Duration,
    max_redirects: usize,
    max_body: usize,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new(Arc::new(SystemResolver))
    }
}

impl HttpFetcher {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3);

    pub fn new(resolver: Arc<dyn Resolver>) -> Self {
        Self {
            resolver,
            timeout: Self::DEFAULT_TIMEOUT,
            max_redirects: 5,
            max_body: 4 << 20,
        }
    }

    /// Deadline for a whole fetch, redirects included.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Zero disables redirect following.
    pub fn with_max_redirects(mut self, n: usize) -> Self {
        self.max_redirects = n;
        self
    }

    async fn fetch_chain(&self, mut req: FetchRequest) -> Result<FetchResponse, FetchError> {
        let mut hops = 0;
        loop {
            let resp = self.fetch_one(&req).await?;
            let location = matches!(resp.status, 301 | 302 | 303 | 307 | 308)
                .then(|| resp.header(LOCATION.as_str()))
                .flatten();
            let Some(location) = location.filter(|_| self.max_redirects > 0) else {
                return Ok(resp);
            };
            if hops == self.max_redirects {
                return Err(FetchError::TooManyRedirects);
            }
            hops += 1;
            req.url = resp
                .url
                .join(location)
                .map_err(|_| FetchError::Protocol(format!("bad Location {location:?}")))?;
        }
    }

    async fn fetch_one(&self, req: &FetchRequest) -> Result<FetchResponse, FetchError> {
        let url = &req.url;
        if url.scheme() != "http" {
            return Err(FetchError::BadUrl(url.to_string()));
        }
        let host = url.host_str().ok_or_else(|| FetchError::BadUrl(url.to_string()))?;
        let port = url.port_or_known_default().unwrap_or(80);
        let addr = match self.resolver.resolve(url) {
            Resolution::Addr(a) => a,
            Resolution::NxDomain => return Err(FetchError::Resolve(host.to_string())),
            Resolution::System => tokio::net::lookup_host((host.trim_matches(['[', ']']), port))
                .await
                .ok()
                .and_then(|mut it| it.next())
                .ok_or_else(|| FetchError::Resolve(host.to_string()))?,
        };

        let stream = TcpStream::connect(addr).await.map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionReset => FetchError::Reset,
            _ => FetchError::Connect(e.to_string()),
        })?;
        let _ = stream.set_nodelay(true);
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(map_hyper)?;
        tokio::spawn(async move {
            let _ = conn.await;
        });

        let host_header = match url.port() {
            Some(p) => format!("{host}:{p}"),
            None => host.to_string(),
        };
        let target = match url.query() {
            Some(q) => format!("{}?{q}", url.path()),
            None => url.path().to_string(),
        };
        let mut builder = hyper::Request::get(target)
            .header(HOST, host_header)
            // Server-side close keeps TIME_WAIT off the client's ephemeral ports.
            .header(CONNECTION, HeaderValue::from_static("close"));
        let mut has_ua = false;
        for (k, v) in &req.headers {
            has_ua |= k.eq_ignore_ascii_case(USER_AGENT.as_str());
            builder = builder.header(k.as_str(), v.as_str());
        }
        if !has_ua {
            builder = builder.header(USER_AGENT, "crossprobe-simclient");
        }
        let request = builder
            .body(Empty::<Bytes>::new())
            .map_err(|e| FetchError::Protocol(e.to_string()))?;

        let resp = sender.send_request(request).await.map_err(map_hyper)?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str().to_string(),
                    String::from_utf8_lossy(v.as_bytes()).into_owned(),
                )
            })
            .collect();
        let body = Limited::new(resp.into_body(), self.max_body)
            .collect()
            .await
            .map_err(|e| match e.downcast::<hyper::Error>() {
                Ok(he) => map_hyper(*he),
                Err(other) => FetchError::Protocol(other.to_string()),
            })?
            .to_bytes();
        Ok(FetchResponse {
            url: url.clone(),
            status,
            headers,
            body,
        })
    }
}

fn map_hyper(e: hyper::Error) -> FetchError {
    let mut source: Option<&(dyn std::error::Error + 'static)> = Some(&e);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe) {
                return FetchError::Reset;
            }
        }
        source = err.source();
    }
    FetchError::Protocol(e.to_string())
}

impl Fetcher for HttpFetcher {
    async fn fetch(&self, req: FetchRequest) -> Result<FetchResponse, FetchError> {
        tokio::time::timeout(self.timeout, self.fetch_chain(req))
            .await
            .unwrap_or(Err(FetchError::Timeout))
    }
}

/// Fails a seeded fraction of fetches with a timeout before touching the
/// network, emulating unreliable clients.
pub struct Flaky<F> {
    inner: F,
    failure_rate: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl<F> Flaky<F> {
    pub fn new(inner: F, failure_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            failure_rate: failure_rate.clamp(0.0, 1.0),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl<F: Fetcher> Fetcher for Flaky<F> {
    async fn fetch(&self, req: FetchRequest) -> Result<FetchResponse, FetchError> {
        let fail = {
            let mut rng = self.rng.lock().expect("rng lock");
            rng.random_bool(self.failure_rate)
        };
        if fail {
            return Err(FetchError::Timeout);
        }
        self.inner.fetch(req).await
    }
}
