use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use crossprobe_core::{FilteringVerdict, MeasurementTask, RegionStats, TaskType};
use crossprobe_net::testbed::assets;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_crossprobe");

fn crossprobe(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).env("NO_COLOR", "1").output().unwrap();
    assert!(
        out.status.success(),
        "crossprobe {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// A HAR of the testbed control page as served under `base`.
fn control_page_har(base: &str) -> Value {
    let entries: Vec<Value> = ["page.html", "favicon.ico", "style.css", "cached.gif", "script.js"]
        .iter()
        .map(|name| {
            let a = assets::lookup(name).unwrap();
            let mut headers = vec![json!({ "name": "Content-Type", "value": a.content_type })];
            headers.extend(a.headers.iter().map(|(k, v)| json!({ "name": k, "value": v })));
            let mut content = json!({ "size": a.body.len(), "mimeType": a.content_type });
            if *name == "style.css" {
                content["text"] = json!(assets::STYLE);
            }
            json!({
                "pageref": "p0",
                "request": { "method": "GET", "url": format!("{base}{name}") },
                "response": { "status": 200, "headers": headers, "content": content },
            })
        })
        .collect();
    json!({ "log": {
        "version": "1.2",
        "pages": [{ "id": "p0", "title": format!("{base}page.html"), "startedDateTime": "2026-03-02T10:00:00Z" }],
        "entries": entries,
    }})
}

fn write_taskgen_inputs(dir: &Path) {
    std::fs::create_dir_all(dir.join("har")).unwrap();
    let har = control_page_har("http://target.test/");
    std::fs::write(dir.join("har/target.har"), serde_json::to_vec(&har).unwrap()).unwrap();
    std::fs::write(dir.join("har/broken.har"), b"{ not json").unwrap();
    std::fs::write(
        dir.join("targets.txt"),
        "# targets\nD target.test\n=http://unrecorded.test/\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("corpus.txt"),
        "http://target.test/page.html\nhttp://other.test/\n",
    )
    .unwrap();
}

#[test]
fn taskgen_writes_tasks_and_feasibility() {
    let dir = tempfile::tempdir().unwrap();
    write_taskgen_inputs(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let args = [
        "taskgen",
        "--targets",
        &p("targets.txt"),
        "--har-dir",
        &p("har"),
        "--corpus",
        &p("corpus.txt"),
        "--out",
        &p("out"),
        "--seed",
        "7",
    ];
    crossprobe(&args);
    let tasks: Vec<MeasurementTask> = lines(&dir.path().join("out/tasks.jsonl"));
    let mut types: Vec<TaskType> = tasks.iter().map(|t| t.task_type).collect();
    types.sort_by_key(|t| format!("{t:?}"));
    types.dedup();
    assert_eq!(types.len(), 4, "{types:?}");
    assert!(tasks.iter().all(|t| t.is_well_formed()));

    let csv = std::fs::read_to_string(dir.path().join("out/feasibility.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(csv.contains("target.test"));

    let first = std::fs::read(dir.path().join("out/tasks.jsonl")).unwrap();
    crossprobe(&args);
    assert_eq!(first, std::fs::read(dir.path().join("out/tasks.jsonl")).unwrap());
}

#[test]
fn taskgen_rejects_a_malformed_target_line() {
    let dir = tempfile::tempdir().unwrap();
    write_taskgen_inputs(dir.path());
    std::fs::write(dir.path().join("targets.txt"), "target.test\n").unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let out = Command::new(BIN)
        .args([
            "taskgen",
            "--targets",
            &p("targets.txt"),
            "--har-dir",
            &p("har"),
            "--corpus",
            &p("corpus.txt"),
        ])
        .args(["--out", &p("out")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("targets.txt:1"));
}

#[test]
fn detect_flags_the_failing_region() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.jsonl");
    std::fs::write(
        &stats,
        "{\"resourceKey\":\"http://a.test/x.png\",\"region\":\"PK\",\"n_r\":10,\"x_r\":3}\n\
         {\"resourceKey\":\"http://a.test/x.png\",\"region\":\"US\",\"n_r\":50,\"x_r\":48}\n",
    )
    .unwrap();
    let out = dir.path().join("verdicts.json");
    crossprobe(&[
        "detect",
        "--stats",
        stats.to_str().unwrap(),
        "--p",
        "0.7",
        "--alpha",
        "0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    let verdicts: Vec<FilteringVerdict> = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let flagged: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.flagged)
        .map(|v| v.region.as_str())
        .collect();
    assert_eq!(flagged, ["PK"]);
    let pk = verdicts.iter().find(|v| v.region.as_str() == "PK").unwrap();
    assert!((pk.p_value - 0.010592).abs() < 1e-6);
    assert_eq!((pk.n, pk.x), (10, 3));
}

#[test]
fn aggregate_joins_records_with_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let ids = [
        "00000000-0000-4000-8000-000000000001",
        "00000000-0000-4000-8000-000000000002",
    ];
    let mut assignments = String::new();
    let mut records = String::new();
    for (i, id) in ids.iter().enumerate() {
        assignments.push_str(&format!(
            "{{\"measurementId\":\"{id}\",\"clientId\":\"c{i}\",\"issuedAt\":\"2026-03-02T10:00:00Z\",\
             \"resourceKey\":\"http://a.test/x.png\",\"taskType\":\"image\",\"region\":\"CN\",\"window\":0}}\n"
        ));
        let terminal = if i == 0 { "success" } else { "failure" };
        for state in ["init", terminal] {
            records.push_str(&format!(
                "{{\"id\":\"{id}\",\"state\":\"{state}\",\"ua\":\"Mozilla/5.0 Chrome/124.0\",\"region\":\"CN\",\
                 \"ts\":\"2026-03-02T10:00:01Z\",\"client\":\"c{i}\"}}\n"
            ));
        }
    }
    records.push_str("{ torn line\n");
    std::fs::write(dir.path().join("assignments.jsonl"), assignments).unwrap();
    std::fs::write(dir.path().join("records.jsonl"), records).unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    crossprobe(&[
        "collector",
        "aggregate",
        "--records",
        &p("records.jsonl"),
        "--assignments",
        &p("assignments.jsonl"),
        "--out",
        &p("stats.jsonl"),
        "--now",
        "2026-03-02T10:05:00Z",
        "--diagnostics",
        &p("diag.json"),
    ]);
    let stats: Vec<RegionStats> = lines(&dir.path().join("stats.jsonl"));
    assert_eq!(stats.len(), 1);
    assert_eq!((stats[0].region.as_str(), stats[0].n, stats[0].x), ("CN", 2, 1));
    let diag: Value = serde_json::from_slice(&std::fs::read(dir.path().join("diag.json")).unwrap()).unwrap();
    assert_eq!(diag["skippedLines"], 1);
}

/// A service process, killed on drop.
struct Service(Child);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a service and waits for the `listening` log line carrying its address.
fn start_service(args: &[&str], envs: &[(&str, &str)]) -> (Service, SocketAddr) {
    let mut child = Command::new(BIN)
        .args(args)
        .env("NO_COLOR", "1")
        .env("RUST_LOG", "info")
        .envs(envs.iter().copied())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if line.contains("listening") {
                let addr = line.split("addr=").nth(1).and_then(|s| s.split_whitespace().next());
                let _ = tx.send(addr.map(str::to_string));
            }
        }
    });
    let addr = rx
        .recv_timeout(Duration::from_secs(30))
        .expect("service did not start")
        .expect("listening line carries an address");
    (Service(child), addr.parse().unwrap())
}

fn start_testbed(mode_map: &Path) -> (Service, SocketAddr) {
    let mut child = Command::new(BIN)
        .args([
            "testbed",
            "--listen",
            "127.0.0.1:0",
            "--mode-map",
            mode_map.to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut first)
        .unwrap();
    let addr = first.trim().trim_start_matches("target http://").trim_end_matches('/');
    (Service(child), addr.parse().unwrap())
}

fn http_get(addr: SocketAddr, path: &str, headers: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n{headers}\r\n"
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = raw.split_once("\r\n\r\n").map(|x| x.1.to_string()).unwrap_or_default();
    (status, body)
}

#[test]
fn services_run_end_to_end_as_processes() {
    let dir = tempfile::tempdir().unwrap();
    write_taskgen_inputs(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    crossprobe(&[
        "taskgen",
        "--targets",
        &p("targets.txt"),
        "--har-dir",
        &p("har"),
        "--corpus",
        &p("corpus.txt"),
        "--out",
        &p("out"),
    ]);
    std::fs::write(
        dir.path().join("modes.txt"),
        "/favicon.ico http-blockpage\n/page.html none\n/style.css none\n/cached.gif none\n/script.js none\n",
    )
    .unwrap();

    let (_testbed, target) = start_testbed(&dir.path().join("modes.txt"));
    let (_collector, collector) = start_service(
        &[
            "collector",
            "serve",
            "--listen",
            "127.0.0.1:0",
            "--records",
            &p("records.jsonl"),
            "--trust-test-headers",
        ],
        &[("CROSSPROBE_EXPORT_TOKEN", "secret")],
    );
    let collector_url = format!("http://{collector}/");
    let (_coordinator, coordinator) = start_service(
        &[
            "coordinator",
            "--listen",
            "127.0.0.1:0",
            "--tasks",
            &p("out/tasks.jsonl"),
            "--collector-url",
            &collector_url,
            "--assignment-log",
            &p("assignments.jsonl"),
            "--trust-test-headers",
        ],
        &[],
    );

    let resolve = format!("target.test={target}");
    let coordinator_url = format!("http://{coordinator}/");
    let out = crossprobe(&[
        "simclient",
        "--coordinator",
        &coordinator_url,
        "--collector",
        &collector_url,
        "--region",
        "PK",
        "--browser",
        "firefox",
        "--count",
        "6",
        "--seed",
        "3",
        "--resolve",
        &resolve,
    ]);
    let runs: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(runs.len(), 6);
    for run in &runs {
        assert_ne!(run["taskType"], "script", "script task sent to firefox");
        let states: Vec<&str> = run["submissions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["state"].as_str().unwrap())
            .collect();
        assert_eq!(states[0], "init");
        // The favicon is behind a block page; everything else is reachable.
        let want = if run["resourceUrl"].as_str().is_some_and(|u| u.ends_with("favicon.ico")) {
            "failure"
        } else {
            "success"
        };
        if run["taskType"].is_string() {
            assert_eq!(states, ["init", want], "{run}");
        }
    }

    let (status, _) = http_get(collector, "/export", "");
    assert_eq!(status, 401);
    let (status, body) = http_get(collector, "/export", "Authorization: Bearer secret\r\n");
    assert_eq!(status, 200);
    assert!(body.contains("\"PK\""));

    let stats_path = dir.path().join("stats.jsonl");
    crossprobe(&[
        "collector",
        "aggregate",
        "--records",
        &p("records.jsonl"),
        "--assignments",
        &p("assignments.jsonl"),
        "--out",
        stats_path.to_str().unwrap(),
    ]);
    let stats: Vec<RegionStats> = lines(&stats_path);
    let served = runs.iter().filter(|r| r["taskType"].is_string()).count() as u64;
    assert_eq!(stats.iter().map(|s| s.n).sum::<u64>(), served);
    assert!(stats.iter().all(|s| s.region.as_str() == "PK"));
}
