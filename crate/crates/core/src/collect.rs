//! Submission wire format, the stored record shape, and the batch jobs that
//! turn a record log into per-region counts.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::domain::{BrowserFamily, ClientContext, MeasurementResult, Region, RegionStats, ResultState};
use crate::schedule::TaskIndex;

pub const PARAM_ID: &str = "cmh-id";
pub const PARAM_RESULT: &str = "cmh-result";
pub const PARAM_ELAPSED: &str = "cmh-elapsed";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("missing {0} parameter")]
    Missing(&'static str),
    #[error("cmh-id {0:?} is not a UUID")]
    BadId(String),
    #[error("cmh-result {0:?} is not init, success or failure")]
    BadResult(String),
    #[error("cmh-elapsed {0:?} is not a non-negative integer")]
    BadElapsed(String),
}

/// A parsed `/submit` query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Submission {
    pub id: Uuid,
    pub state: ResultState,
    pub elapsed_ms: Option<u64>,
}

impl Submission {
    /// Parses the raw query string. The first occurrence of a repeated
    /// parameter wins.
    pub fn parse_query(query: &str) -> Result<Self, SubmitError> {
        let mut id = None;
        let mut result = None;
        let mut elapsed = None;
        for (k, v) in url::form_urlencoded::parse(query.as_bytes()) {
            let slot = match k.as_ref() {
                PARAM_ID => &mut id,
                PARAM_RESULT => &mut result,
                PARAM_ELAPSED => &mut elapsed,
                _ => continue,
            };
            if slot.is_none() {
                *slot = Some(v.into_owned());
            }
        }
        let id_raw = id.ok_or(SubmitError::Missing(PARAM_ID))?;
        // Only the hyphenated form the clients emit is accepted.
        if id_raw.len() != 36 {
            return Err(SubmitError::BadId(id_raw));
        }
        let id = Uuid::parse_str(&id_raw).map_err(|_| SubmitError::BadId(id_raw.clone()))?;
        let result_raw = result.ok_or(SubmitError::Missing(PARAM_RESULT))?;
        let state = result_raw
            .parse::<ResultState>()
            .map_err(|_| SubmitError::BadResult(result_raw.clone()))?;
        let elapsed_ms = match elapsed {
            None => None,
            Some(e) if !e.is_empty() && e.bytes().all(|b| b.is_ascii_digit()) => {
                Some(e.parse().map_err(|_| SubmitError::BadElapsed(e.clone()))?)
            }
            Some(e) => return Err(SubmitError::BadElapsed(e)),
        };
        Ok(Submission { id, state, elapsed_ms })
    }

    /// `/submit?cmh-id=<uuid>&cmh-result=<state>[&cmh-elapsed=<ms>]`
    pub fn to_query_path(&self) -> String {
        let mut path = format!(
            "/submit?{PARAM_ID}={}&{PARAM_RESULT}={}",
            self.id.hyphenated(),
            self.state.as_str()
        );
        if let Some(ms) = self.elapsed_ms {
            path.push_str(&format!("&{PARAM_ELAPSED}={ms}"));
        }
        path
    }
}

/// One line of the collector's record log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredRecord {
    pub id: Uuid,
    pub state: ResultState,
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
    pub ua: String,
    pub region: Region,
    pub ts: DateTime<Utc>,
    #[serde(default)]
    pub origin: Option<String>,
    /// Hashed client address.
    #[serde(default)]
    pub client: String,
}

impl StoredRecord {
    pub fn to_result(&self) -> MeasurementResult {
        MeasurementResult {
            measurement_id: self.id,
            state: self.state,
            elapsed_ms: self.elapsed_ms,
            received_at: self.ts,
            context: ClientContext {
                client_id: self.client.clone(),
                region: self.region,
                browser_family: BrowserFamily::from_user_agent(&self.ua),
                origin_site: self.origin.clone(),
            },
        }
    }
}

/// Collapses repeated `(id, state)` pairs to the earliest record, keeping
/// the surviving records in log order.
pub fn compact(records: &[StoredRecord]) -> Vec<StoredRecord> {
    let mut earliest: HashMap<(Uuid, ResultState), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        earliest
            .entry((r.id, r.state))
            .and_modify(|j| {
                if r.ts < records[*j].ts {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let keep: HashSet<usize> = earliest.into_values().collect();
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AutomationFilter {
    /// Lowercase substrings that mark a User-Agent as automated.
    pub bot_markers: Vec<String>,
    /// Submissions kept per client in any rolling hour.
    pub max_per_hour: usize,
}

impl Default for AutomationFilter {
    fn default() -> Self {
        AutomationFilter {
            bot_markers: [
                "bot",
                "crawler",
                "spider",
                "slurp",
                "phantomjs",
                "headlesschrome",
                "python-requests",
                "facebookexternalhit",
                "curl/",
                "wget/",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            max_per_hour: 100,
        }
    }
}

impl AutomationFilter {
    pub fn is_bot(&self, ua: &str) -> bool {
        let ua = ua.to_ascii_lowercase();
        self.bot_markers.iter().any(|m| ua.contains(m.as_str()))
    }

    /// Drops crawler submissions and whatever a client sends beyond the
    /// hourly cap, in timestamp order. Survivors keep their log order.
    pub fn apply(&self, records: &[StoredRecord]) -> Vec<StoredRecord> {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by_key(|&i| records[i].ts);
        let hour = Duration::hours(1);
        let mut windows: HashMap<&str, VecDeque<DateTime<Utc>>> = HashMap::new();
        let mut keep = vec![false; records.len()];
        for i in order {
            let r = &records[i];
            if self.is_bot(&r.ua) {
                continue;
            }
            let recent = windows.entry(r.client.as_str()).or_default();
            while recent.front().is_some_and(|&t| r.ts - t >= hour) {
                recent.pop_front();
            }
            if recent.len() < self.max_per_hour {
                recent.push_back(r.ts);
                keep[i] = true;
            }
        }
        records
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(r, _)| r.clone())
            .collect()
    }
}

pub fn filter_automation(records: &[StoredRecord], filter: &AutomationFilter) -> Vec<StoredRecord> {
    filter.apply(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AggregateConfig {
    /// How long an initialized measurement may stay without a result.
    pub timeout_secs: i64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig { timeout_secs: 120 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AggregateDiagnostics {
    /// IDs that no issued task explains.
    pub unknown_ids: u64,
    /// IDs with a result but no init.
    pub missing_init: u64,
    /// IDs still within the timeout.
    pub pending: u64,
    /// Timed-out inline-frame measurements, which are dropped.
    pub dropped_frame_timeouts: u64,
    /// Timed-out explicit-feedback measurements, counted as failures.
    pub timeouts_as_failure: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Aggregation {
    pub stats: Vec<RegionStats>,
    pub diagnostics: AggregateDiagnostics,
}

/// Counts attempts (`n`) and successes (`x`) per resource and region.
///
/// An ID counts once, in the region its init came from, when it has an init
/// and a terminal result. Without a terminal result past the timeout it
/// counts as a failure for tasks with explicit load/error feedback and is
/// dropped for inline frames.
pub fn aggregate(
    results: &[MeasurementResult],
    index: &TaskIndex,
    cfg: &AggregateConfig,
    now: DateTime<Utc>,
) -> Aggregation {
    let mut by_id: BTreeMap<Uuid, Vec<&MeasurementResult>> = BTreeMap::new();
    for r in results {
        by_id.entry(r.measurement_id).or_default().push(r);
    }

    let mut diag = AggregateDiagnostics::default();
    let mut counts: BTreeMap<(String, Region), (u64, u64)> = BTreeMap::new();
    let timeout = Duration::seconds(cfg.timeout_secs);

    for (id, records) in by_id {
        let Some(task) = index.get(&id) else {
            diag.unknown_ids += 1;
            continue;
        };
        let earliest = |pred: &dyn Fn(ResultState) -> bool| {
            records
                .iter()
                .filter(|r| pred(r.state))
                .min_by_key(|r| r.received_at)
                .copied()
        };
        let Some(init) = earliest(&|s| s == ResultState::Init) else {
            diag.missing_init += 1;
            continue;
        };
        let success = match earliest(&ResultState::is_terminal) {
            Some(terminal) => terminal.state == ResultState::Success,
            None if now - init.received_at > timeout => {
                if task.task_type.has_explicit_feedback() {
                    diag.timeouts_as_failure += 1;
                    false
                } else {
                    diag.dropped_frame_timeouts += 1;
                    continue;
                }
            }
            None => {
                diag.pending += 1;
                continue;
            }
        };
        let slot = counts
            .entry((task.resource_key.clone(), init.context.region))
            .or_default();
        slot.0 += 1;
        slot.1 += u64::from(success);
    }

    Aggregation {
        stats: counts
            .into_iter()
            .map(|((resource_key, region), (n, x))| RegionStats {
                resource_key,
                region,
                n,
                x,
            })
            .collect(),
        diagnostics: diag,
    }
}
