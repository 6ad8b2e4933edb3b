//! Emulated filtering testbed: a target server whose per-path behaviour is
//! set by a mode map, a block-page server, and a resolution hook that
//! emulates DNS-stage filtering for clients that use it.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use crossprobe_core::har::{HarDocument, HarEntry};
use socket2::SockRef;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use url::Url;

use crate::fetch::{Resolution, Resolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterMode {
    None,
    DnsNxdomain,
    DnsRedirect,
    TcpReset,
    TcpDrop,
    HttpBlockPage,
    HttpDrop,
    HttpRedirect,
}

impl FilterMode {
    pub const ALL: [FilterMode; 8] = [
        FilterMode::None,
        FilterMode::DnsNxdomain,
        FilterMode::DnsRedirect,
        FilterMode::TcpReset,
        FilterMode::TcpDrop,
        FilterMode::HttpBlockPage,
        FilterMode::HttpDrop,
        FilterMode::HttpRedirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::DnsNxdomain => "dns-nxdomain",
            FilterMode::DnsRedirect => "dns-redirect",
            FilterMode::TcpReset => "tcp-reset",
            FilterMode::TcpDrop => "tcp-drop",
            FilterMode::HttpBlockPage => "http-blockpage",
            FilterMode::HttpDrop => "http-drop",
            FilterMode::HttpRedirect => "http-redirect",
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterMode {
    type Err = TestbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TestbedError::ModeMap(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("mode map: {0}")]
    ModeMap(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Path to filtering mode; one mode per path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModeMap(BTreeMap<String, FilterMode>);

impl ModeMap {
    /// Parses `<path> <mode>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TestbedError> {
        let mut map = ModeMap::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(path), Some(mode), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TestbedError::ModeMap(format!(
                    "line {}: expected `<path> <mode>`",
                    i + 1
                )));
            };
            let mode = mode
                .parse()
                .map_err(|e: TestbedError| TestbedError::ModeMap(format!("line {}: {e}", i + 1)))?;
            map.insert(path, mode)
                .map_err(|e| TestbedError::ModeMap(format!("line {}: {e}", i + 1)))?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, path: &str, mode: FilterMode) -> Result<(), String> {
        if !path.starts_with('/') {
            return Err(format!("path {path:?} must start with '/'"));
        }
        if self.0.insert(path.to_string(), mode).is_some() {
            return Err(format!("path {path:?} configured twice"));
        }
        Ok(())
    }

    /// Every control asset under `prefix` (e.g. `/` or `/m/tcp-reset/`).
    pub fn with_assets(mut self, prefix: &str, mode: FilterMode) -> Result<Self, String> {
        let prefix = prefix.trim_end_matches('/');
        for name in assets::NAMES {
            self.insert(&format!("{prefix}/{name}"), mode)?;
        }
        Ok(self)
    }

    /// Control assets at the root, unfiltered.
    pub fn control() -> Self {
        ModeMap::default()
            .with_assets("/", FilterMode::None)
            .expect("fresh map has no duplicates")
    }

    pub fn get(&self, path: &str) -> Option<FilterMode> {
        self.0.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FilterMode)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Bundled control assets, looked up by the last path segment.
pub mod assets {
    pub const FAVICON: &[u8] = include_bytes!("../assets/favicon.png");
    pub const CACHED_IMAGE: &[u8] = include_bytes!("../assets/cached.gif");
    pub const STYLE: &str = "p.crossprobe { color: blue }\n";
    pub const SCRIPT: &str = "window.crossprobeControl = true;\n";
    pub const PAGE: &str = "<!doctype html>\n<html><head><title>control</title>\
<link rel=\"icon\" href=\"favicon.ico\">\
<link rel=\"stylesheet\" href=\"style.css\"></head>\
<body><p class=\"crossprobe\">control page</p><img src=\"cached.gif\" alt=\"\">\
<script src=\"script.js\"></script></body></html>\n";
    pub const BLOCK_PAGE: &str = "<!doctype html>\n<html><head><title>Blocked</title></head>\
<body><h1>Access denied</h1><p>This site has been blocked.</p></body></html>\n";

    pub const NAMES: [&str; 5] = ["favicon.ico", "style.css", "page.html", "cached.gif", "script.js"];

    pub struct Asset {
        pub body: &'static [u8],
        pub content_type: &'static str,
        pub headers: &'static [(&'static str, &'static str)],
    }

    pub fn lookup(name: &str) -> Option<Asset> {
        let (body, content_type, headers): (&[u8], _, &[(&str, &str)]) = match name {
            "favicon.ico" => (FAVICON, "image/png", &[("Cache-Control", "public, max-age=86400")]),
            "cached.gif" => (CACHED_IMAGE, "image/gif", &[("Cache-Control", "public, max-age=86400")]),
            "style.css" => (STYLE.as_bytes(), "text/css", &[("Cache-Control", "no-cache")]),
            "page.html" => (
                PAGE.as_bytes(),
                "text/html; charset=utf-8",
                &[("Cache-Control", "no-cache")],
            ),
            "script.js" => (
                SCRIPT.as_bytes(),
                "application/javascript",
                &[("Cache-Control", "no-cache"), ("X-Content-Type-Options", "nosniff")],
            ),
            _ => return None,
        };
        Some(Asset {
            body,
            content_type,
            headers,
        })
    }
}

/// The HAR a browser would record loading `page.html` under `base`.
pub fn control_har(base: &Url) -> HarDocument {
    let mut entries = Vec::new();
    let order = ["page.html", "favicon.ico", "style.css", "cached.gif", "script.js"];
    for name in order {
        let asset = assets::lookup(name).expect("bundled asset");
        let mut headers = vec![("Content-Type", asset.content_type)];
        headers.extend_from_slice(asset.headers);
        let url = base.join(name).expect("asset name is a relative url");
        let mut entry = HarEntry::new(url.as_str(), 200, asset.content_type, asset.body.len() as u64, &headers);
        if asset.content_type == "text/css" {
            entry = entry.with_text(std::str::from_utf8(asset.body).expect("utf-8 css"));
        }
        entries.push(entry);
    }
    HarDocument::new(base.join("page.html").expect("relative url").as_str(), entries)
}

#[derive(Debug, Clone)]
pub struct TestbedConfig {
    pub mode_map: ModeMap,
    /// Upper bound on how long drop modes hold a connection.
    pub hold_max: Duration,
}

impl TestbedConfig {
    pub fn new(mode_map: ModeMap) -> Self {
        Self {
            mode_map,
            hold_max: Duration::from_secs(60),
        }
    }
}

struct AbortOnDrop(JoinHandle<()>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        self.0.abort();
    }
}

/// A running testbed. Stops accepting when dropped.
pub struct Testbed {
    target_addr: SocketAddr,
    block_addr: SocketAddr,
    mode_map: Arc<ModeMap>,
    _tasks: [AbortOnDrop; 2],
}

impl Testbed {
    /// Binds both listeners on ephemeral ports of `ip`.
    pub async fn bind(ip: IpAddr, cfg: TestbedConfig) -> Result<Self, TestbedError> {
        let target = TcpListener::bind((ip, 0)).await?;
        let block = TcpListener::bind((ip, 0)).await?;
        Self::start(target, block, cfg)
    }

    pub fn start(target: TcpListener, block: TcpListener, cfg: TestbedConfig) -> Result<Self, TestbedError> {
        let target_addr = target.local_addr()?;
        let block_addr = block.local_addr()?;
        let mode_map = Arc::new(cfg.mode_map);
        let shared = Arc::new(Shared {
            mode_map: mode_map.clone(),
            block_url: format!("http://{block_addr}/blocked"),
            hold_max: cfg.hold_max,
        });
        let t = {
            let shared = shared.clone();
            tokio::spawn(accept_loop(target, move |s| {
                let shared = shared.clone();
                async move { shared.serve_target(s).await }
            }))
        };
        let b = tokio::spawn(accept_loop(block, serve_block));
        tracing::info!(%target_addr, %block_addr, paths = mode_map.len(), "testbed listening");
        Ok(Self {
            target_addr,
            block_addr,
            mode_map,
            _tasks: [AbortOnDrop(t), AbortOnDrop(b)],
        })
    }

    pub fn target_addr(&self) -> SocketAddr {
        self.target_addr
    }

    pub fn block_addr(&self) -> SocketAddr {
        self.block_addr
    }

    pub fn mode_map(&self) -> &ModeMap {
        &self.mode_map
    }

    /// Resolution hook that maps `host` to this testbed and applies the
    /// DNS-stage modes configured for the requested path.
    pub fn resolver(&self, host: &str) -> TestbedResolver {
        TestbedResolver {
            host: host.to_ascii_lowercase(),
            target: self.target_addr,
            block: self.block_addr,
            mode_map: self.mode_map.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestbedResolver {
    host: String,
    target: SocketAddr,
    block: SocketAddr,
    mode_map: Arc<ModeMap>,
}

impl Resolver for TestbedResolver {
    fn resolve(&self, url: &Url) -> Resolution {
        if url.host_str() != Some(self.host.as_str()) {
            return Resolution::System;
        }
        match self.mode_map.get(url.path()) {
            Some(FilterMode::DnsNxdomain) => Resolution::NxDomain,
            Some(FilterMode::DnsRedirect) => Resolution::Addr(self.block),
            _ => Resolution::Addr(self.target),
        }
    }
}

async fn accept_loop<F, Fut>(listener: TcpListener, handler: F)
where
    F: Fn(TcpStream) -> Fut,
    Fut: std::future::Future<Output = ()> + Send + 'static,
{
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(handler(stream));
            }
            Err(e) => {
                tracing::warn!(error = %e, "testbed accept failed");
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        }
    }
}

struct Shared {
    mode_map: Arc<ModeMap>,
    block_url: String,
    hold_max: Duration,
}

const MAX_HEAD: usize = 16 * 1024;

/// Reads until the end of the request head. Returns the request path and
/// any bytes read past the head.
async fn read_head(stream: &mut TcpStream) -> Option<(String, usize)> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 2048];
    loop {
        let n = stream.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        let mut headers = [httparse::EMPTY_HEADER; 64];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(&buf) {
            Ok(httparse::Status::Complete(len)) => {
                let content_length = req
                    .headers
                    .iter()
                    .find(|h| h.name.eq_ignore_ascii_case("content-length"))
                    .and_then(|h| std::str::from_utf8(h.value).ok()?.trim().parse().ok())
                    .unwrap_or(0usize);
                let path = req.path?.split(['?', '#']).next().unwrap_or("/").to_string();
                let pending = content_length.saturating_sub(buf.len() - len);
                return Some((path, pending));
            }
            Ok(httparse::Status::Partial) if buf.len() < MAX_HEAD => continue,
            _ => return None,
        }
    }
}

async fn respond(stream: &mut TcpStream, status: &str, headers: &[(&str, &str)], body: &[u8]) {
    let mut head = format!(
        "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    for (k, v) in headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    let _ = stream.write_all(head.as_bytes()).await;
    let _ = stream.write_all(body).await;
    let _ = stream.shutdown().await;
}

/// Keeps the connection open and silent until the peer gives up.
async fn hold(stream: &mut TcpStream, max: Duration, drain: bool) {
    let _ = tokio::time::timeout(max, async {
        let mut sink = [0u8; 1024];
        if drain {
            while matches!(stream.read(&mut sink).await, Ok(n) if n > 0) {}
        } else {
            // Wait for the peer to close without consuming what it sends.
            while stream.peek(&mut sink).await.is_ok_and(|n| n > 0) {
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    })
    .await;
}

impl Shared {
    async fn serve_target(&self, mut stream: TcpStream) {
        let Some((path, pending)) = read_head(&mut stream).await else {
            respond(&mut stream, "400 Bad Request", &[], b"").await;
            return;
        };
        let Some(mode) = self.mode_map.get(&path) else {
            respond(
                &mut stream,
                "404 Not Found",
                &[("Content-Type", "text/plain")],
                b"not found\n",
            )
            .await;
            return;
        };
        tracing::debug!(%path, %mode, "testbed request");
        match mode {
            // DNS-stage modes act in the resolver; a direct hit sees the asset.
            FilterMode::None | FilterMode::DnsNxdomain | FilterMode::DnsRedirect => {
                let name = path.rsplit('/').next().unwrap_or_default();
                match assets::lookup(name) {
                    Some(a) => {
                        let mut headers = vec![("Content-Type", a.content_type)];
                        headers.extend_from_slice(a.headers);
                        respond(&mut stream, "200 OK", &headers, a.body).await;
                    }
                    None => respond(&mut stream, "404 Not Found", &[], b"").await,
                }
            }
            FilterMode::TcpReset => {
                let _ = SockRef::from(&stream).set_linger(Some(Duration::ZERO));
                drop(stream);
            }
            FilterMode::TcpDrop => hold(&mut stream, self.hold_max, false).await,
            FilterMode::HttpDrop => {
                let mut rest = vec![0u8; pending.min(MAX_HEAD)];
                let _ = stream.read_exact(&mut rest).await;
                hold(&mut stream, self.hold_max, true).await;
            }
            FilterMode::HttpBlockPage => block_page(&mut stream).await,
            FilterMode::HttpRedirect => {
                respond(
                    &mut stream,
                    "302 Found",
                    &[("Location", &self.block_url), ("Content-Type", "text/plain")],
                    b"",
                )
                .await;
            }
        }
    }
}

async fn block_page(stream: &mut TcpStream) {
    respond(
        stream,
        "200 OK",
        &[
            ("Content-Type", "text/html; charset=utf-8"),
            ("Cache-Control", "no-store"),
        ],
        assets::BLOCK_PAGE.as_bytes(),
    )
    .await;
}

async fn serve_block(mut stream: TcpStream) {
    if read_head(&mut stream).await.is_some() {
        block_page(&mut stream).await;
    }
}
