//! Network side of crossprobe: the coordinator and collector HTTP services,
//! the filtering testbed, and a simulated client that speaks the same wire
//! protocol a browser would.

pub mod collector;
pub mod coordinator;
pub mod fetch;
pub mod geo;
pub mod simclient;
pub mod testbed;

use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use axum::http::HeaderMap;
use axum::Router;
use chrono::{DateTime, Utc};
use crossprobe_core::{BrowserFamily, ClientContext, Region};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::geo::GeoLookup;

/// Region override honoured only when test headers are trusted.
pub const HEADER_TEST_REGION: &str = "x-test-region";
/// Client identity override honoured only when test headers are trusted.
pub const HEADER_TEST_CLIENT: &str = "x-test-client";

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.0.lock().expect("clock lock") = t;
    }

    pub fn advance(&self, d: chrono::Duration) {
        *self.0.lock().expect("clock lock") += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

/// Derives the client context of a request from its headers and peer
/// address.
#[derive(Clone)]
pub struct ContextSource {
    pub geo: Arc<dyn GeoLookup>,
    pub salt: String,
    pub trust_test_headers: bool,
}

impl ContextSource {
    pub fn new(geo: Arc<dyn GeoLookup>) -> Self {
        Self {
            geo,
            salt: String::new(),
            trust_test_headers: false,
        }
    }

    pub fn derive(&self, headers: &HeaderMap, peer: Option<IpAddr>) -> ClientContext {
        let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::trim);
        let ua = header("user-agent").unwrap_or_default();
        let test_region = self
            .trust_test_headers
            .then(|| header(HEADER_TEST_REGION)?.parse::<Region>().ok())
            .flatten();
        let region = test_region
            .or_else(|| peer.map(|ip| self.geo.lookup(ip)))
            .unwrap_or(Region::UNKNOWN);
        let test_client = self
            .trust_test_headers
            .then(|| header(HEADER_TEST_CLIENT).filter(|c| !c.is_empty()))
            .flatten();
        let client_id = match (test_client, peer) {
            (Some(c), _) => c.to_string(),
            (None, Some(ip)) => geo::client_id(&self.salt, ip),
            (None, None) => "unknown".to_string(),
        };
        ClientContext {
            client_id,
            region,
            browser_family: BrowserFamily::from_user_agent(ua),
            origin_site: header("referer").filter(|r| !r.is_empty()).map(str::to_string),
        }
    }
}

/// A router served on a background task; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub async fn spawn(listener: TcpListener, router: Router) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let task = tokio::spawn(async move {
            let svc = router.into_make_service_with_connect_info::<SocketAddr>();
            if let Err(e) = axum::serve(listener, svc).await {
                tracing::error!(error = %e, "server stopped");
            }
        });
        Ok(Self { addr, task })
    }

    /// Serves on an ephemeral loopback port.
    pub async fn spawn_local(router: Router) -> std::io::Result<Self> {
        Self::spawn(TcpListener::bind(("127.0.0.1", 0)).await?, router).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> url::Url {
        url::Url::parse(&format!("http://{}/", self.addr)).expect("socket address forms a url")
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Peer address from a request's connect info, when the server recorded it.
pub(crate) fn peer_ip(ext: &axum::http::Extensions) -> Option<IpAddr> {
    ext.get::<axum::extract::ConnectInfo<SocketAddr>>().map(|c| c.0.ip())
}
