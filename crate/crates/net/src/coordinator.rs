//! Task delivery service: `/task.json` for programmatic clients, `/task`
//! as an embeddable HTML document for browsers, `/healthz`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Request, State};
use axum::http::header::{ACCESS_CONTROL_ALLOW_ORIGIN, CACHE_CONTROL, CONTENT_SECURITY_POLICY, CONTENT_TYPE};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use crossprobe_core::schedule::{task_index, Assignment, Scheduler, TaskIndex};
use crossprobe_core::{ClientContext, TaskDescriptor};
use serde_json::json;

use crate::{peer_ip, Clock, ContextSource};

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    /// Base URL clients submit results to.
    pub collector_url: String,
    /// Where the `/task` document loads the browser runner from.
    pub runner_url: String,
    /// Served at `/runner.js` when set.
    pub runner_bundle: Option<Vec<u8>>,
    /// Appended with one JSON assignment per line when set.
    pub assignment_log: Option<PathBuf>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            collector_url: "http://127.0.0.1:8081".into(),
            runner_url: "/runner.js".into(),
            runner_bundle: None,
            assignment_log: None,
        }
    }
}

struct Inner {
    scheduler: Scheduler,
    log: Option<BufWriter<File>>,
}

pub struct Coordinator {
    inner: Mutex<Inner>,
    context: ContextSource,
    clock: Arc<dyn Clock>,
    cfg: CoordinatorConfig,
}

impl Coordinator {
    pub fn new(
        scheduler: Scheduler,
        context: ContextSource,
        clock: Arc<dyn Clock>,
        cfg: CoordinatorConfig,
    ) -> io::Result<Arc<Self>> {
        let log = match &cfg.assignment_log {
            Some(path) => Some(BufWriter::new(File::options().create(true).append(true).open(path)?)),
            None => None,
        };
        Ok(Arc::new(Self {
            inner: Mutex::new(Inner { scheduler, log }),
            context,
            clock,
            cfg,
        }))
    }

    /// Schedules one task for `ctx` and records the assignment.
    pub fn assign(&self, ctx: &ClientContext) -> TaskDescriptor {
        let now = self.clock.now();
        let mut inner = self.inner.lock().expect("scheduler lock");
        let descriptor = inner.scheduler.next_task(ctx, now);
        if descriptor.task().is_some() {
            let Inner { scheduler, log } = &mut *inner;
            if let (Some(w), Some(a)) = (log.as_mut(), scheduler.assignments().last()) {
                let line = serde_json::to_string(a).expect("assignment serializes");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    tracing::error!(error = %e, "assignment log write failed");
                }
            }
        }
        descriptor
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.inner
            .lock()
            .expect("scheduler lock")
            .scheduler
            .assignments()
            .to_vec()
    }

    pub fn task_index(&self) -> TaskIndex {
        task_index(self.inner.lock().expect("scheduler lock").scheduler.assignments())
    }

    fn budget(&self) -> u32 {
        self.inner
            .lock()
            .expect("scheduler lock")
            .scheduler
            .config()
            .per_client_budget
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/task.json", get(task_json))
            .route("/task", get(task_html))
            .route("/runner.js", get(runner))
            .route("/healthz", get(|| async { "ok" }))
            .with_state(self.clone())
    }
}

fn context_of(state: &Coordinator, req: &Request) -> ClientContext {
    state.context.derive(req.headers(), peer_ip(req.extensions()))
}

async fn task_json(State(state): State<Arc<Coordinator>>, req: Request) -> Response {
    let ctx = context_of(&state, &req);
    let descriptor = state.assign(&ctx);
    (
        [
            (CONTENT_TYPE, "application/json"),
            (CACHE_CONTROL, "no-store"),
            (ACCESS_CONTROL_ALLOW_ORIGIN, "*"),
        ],
        descriptor.to_json(),
    )
        .into_response()
}

/// JSON that is safe inside a `<script>` element.
fn script_safe_json(value: &serde_json::Value) -> String {
    value
        .to_string()
        .replace('<', "\\u003c")
        .replace('>', "\\u003e")
        .replace('&', "\\u0026")
}

fn attr_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('"', "&quot;").replace('<', "&lt;")
}

async fn task_html(State(state): State<Arc<Coordinator>>, req: Request) -> Response {
    let ctx = context_of(&state, &req);
    let mut tasks = Vec::new();
    for _ in 0..state.budget().max(1) {
        match state.assign(&ctx) {
            TaskDescriptor::Task(t) => tasks.push(serde_json::to_value(t).expect("task serializes")),
            TaskDescriptor::Noop => break,
        }
    }
    let config = json!({ "collector": state.cfg.collector_url, "tasks": tasks });
    let body = format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>crossprobe</title></head><body>\n\
<script id=\"crossprobe-config\" type=\"application/json\">{}</script>\n\
<script src=\"{}\"></script>\n</body></html>\n",
        script_safe_json(&config),
        attr_escape(&state.cfg.runner_url)
    );
    (
        [
            (CONTENT_TYPE, "text/html; charset=utf-8"),
            (CACHE_CONTROL, "no-store"),
            (CONTENT_SECURITY_POLICY, "frame-ancestors *"),
        ],
        body,
    )
        .into_response()
}

async fn runner(State(state): State<Arc<Coordinator>>) -> Response {
    match &state.cfg.runner_bundle {
        Some(js) => (
            [
                (CONTENT_TYPE, "application/javascript"),
                (CACHE_CONTROL, "public, max-age=300"),
            ],
            js.clone(),
        )
            .into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}
