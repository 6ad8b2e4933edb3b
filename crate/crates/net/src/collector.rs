//! Submission endpoint and its append-only JSON-lines record store.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{RawQuery, Request, State};
use axum::http::header::{ACCESS_CONTROL_ALLOW_ORIGIN, AUTHORIZATION, CACHE_CONTROL, CONTENT_TYPE};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use crossprobe_core::collect::{compact, StoredRecord, Submission};
use crossprobe_core::ResultState;
use uuid::Uuid;

use crate::{peer_ip, Clock, ContextSource};

/// Reads a record log, skipping lines that do not parse.
pub fn read_records(reader: impl BufRead) -> io::Result<(Vec<StoredRecord>, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                skipped += 1;
                tracing::warn!(error = %e, "skipping malformed record line");
            }
        }
    }
    Ok((records, skipped))
}

pub fn write_records(mut w: impl Write, records: &[StoredRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

struct StoreInner {
    records: Vec<StoredRecord>,
    seen: HashSet<(Uuid, ResultState)>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

/// Append-only record log. A repeated `(id, state)` pair is not appended,
/// so the log holds the earliest copy of each.
pub struct RecordStore {
    inner: Mutex<StoreInner>,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(StoreInner {
                records: Vec::new(),
                seen: HashSet::new(),
                file: None,
            }),
        }
    }

    /// Opens (or creates) a log file and replays what it already holds.
    pub fn open(path: &Path) -> io::Result<Self> {
        let existing = match File::open(path) {
            Ok(f) => read_records(BufReader::new(f))?.0,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let records = compact(&existing);
        let seen = records.iter().map(|r| (r.id, r.state)).collect();
        let file = BufWriter::new(File::options().create(true).append(true).open(path)?);
        Ok(Self {
            inner: Mutex::new(StoreInner {
                records,
                seen,
                file: Some((path.to_path_buf(), file)),
            }),
        })
    }

    /// Returns `false` when the `(id, state)` pair was already stored.
    pub fn append(&self, record: StoredRecord) -> io::Result<bool> {
        let mut inner = self.inner.lock().expect("store lock");
        if !inner.seen.insert((record.id, record.state)) {
            return Ok(false);
        }
        if let Some((_, w)) = inner.file.as_mut() {
            let written = serde_json::to_writer(&mut *w, &record)
                .map_err(io::Error::from)
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush());
            if let Err(e) = written {
                inner.seen.remove(&(record.id, record.state));
                return Err(e);
            }
        }
        inner.records.push(record);
        Ok(true)
    }

    pub fn snapshot(&self) -> Vec<StoredRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrites the backing file with exactly the in-memory records,
    /// dropping duplicates and malformed lines left by earlier runs.
    pub fn compact_file(&self) -> io::Result<()> {
        let mut inner = self.inner.lock().expect("store lock");
        let StoreInner { records, file, .. } = &mut *inner;
        let Some((path, w)) = file.as_mut() else {
            return Ok(());
        };
        w.flush()?;
        let tmp = path.with_extension("compacting");
        write_records(BufWriter::new(File::create(&tmp)?), records)?;
        fs::rename(&tmp, &*path)?;
        *w = BufWriter::new(File::options().append(true).open(&*path)?);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollectorConfig {
    /// Bearer token for `/export`; export is disabled without one.
    pub export_token: Option<String>,
}

pub struct Collector {
    store: RecordStore,
    context: ContextSource,
    clock: Arc<dyn Clock>,
    cfg: CollectorConfig,
}

impl Collector {
    pub fn new(store: RecordStore, context: ContextSource, clock: Arc<dyn Clock>, cfg: CollectorConfig) -> Arc<Self> {
        Arc::new(Self {
            store,
            context,
            clock,
            cfg,
        })
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/submit", get(submit))
            .route("/export", get(export))
            .route("/healthz", get(|| async { "ok" }))
            .with_state(self.clone())
    }
}

const CORS: (axum::http::HeaderName, &str) = (ACCESS_CONTROL_ALLOW_ORIGIN, "*");

async fn submit(State(state): State<Arc<Collector>>, RawQuery(query): RawQuery, req: Request) -> Response {
    let raw = query.unwrap_or_default();
    let sub = match Submission::parse_query(&raw) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(query = %raw, error = %e, "rejected submission");
            return (StatusCode::BAD_REQUEST, [CORS], e.to_string()).into_response();
        }
    };
    let ctx = state.context.derive(req.headers(), peer_ip(req.extensions()));
    let ua = req
        .headers()
        .get("user-agent")
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let record = StoredRecord {
        id: sub.id,
        state: sub.state,
        elapsed_ms: sub.elapsed_ms,
        ua,
        region: ctx.region,
        ts: state.clock.now(),
        origin: ctx.origin_site,
        client: ctx.client_id,
    };
    match state.store.append(record) {
        Ok(_) => (StatusCode::NO_CONTENT, [CORS, (CACHE_CONTROL, "no-store")]).into_response(),
        Err(e) => {
            tracing::error!(error = %e, "record append failed");
            (StatusCode::INTERNAL_SERVER_ERROR, [CORS]).into_response()
        }
    }
}

async fn export(State(state): State<Arc<Collector>>, req: Request) -> Response {
    let Some(token) = &state.cfg.export_token else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let presented = req
        .headers()
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(token.as_str()) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let mut body = Vec::new();
    write_records(&mut body, &state.store.snapshot()).expect("writing to memory");
    (
        [(CONTENT_TYPE, "application/x-ndjson"), (CACHE_CONTROL, "no-store")],
        body,
    )
        .into_response()
}
