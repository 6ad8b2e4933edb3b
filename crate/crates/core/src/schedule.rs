//! Task scheduling: which template a client gets, and the log of who got
//! what.
//!
//! Templates are grouped by resource key and never consumed. Time is cut
//! into aligned batch windows; the first assignment in a window pins one
//! key, and every client that can run a task for that key gets it, so
//! clients in different regions measure the same resource close together.
//! Successive windows pin keys round-robin.

use std::collections::{HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::domain::{ClientContext, DomainError, MeasurementTask, Region, TaskDescriptor, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ScheduleConfig {
    pub batch_window_secs: u64,
    /// Tasks one client may receive per batch window.
    pub per_client_budget: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            batch_window_secs: 60,
            per_client_budget: 1,
        }
    }
}

/// One issued task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Assignment {
    pub measurement_id: Uuid,
    pub client_id: String,
    pub issued_at: DateTime<Utc>,
    pub resource_key: String,
    pub task_type: TaskType,
    pub region: Region,
    pub window: i64,
}

/// What aggregation needs to know about a measurement ID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskRef {
    pub resource_key: String,
    pub task_type: TaskType,
}

pub type TaskIndex = HashMap<Uuid, TaskRef>;

pub fn task_index<'a>(assignments: impl IntoIterator<Item = &'a Assignment>) -> TaskIndex {
    assignments
        .into_iter()
        .map(|a| {
            (
                a.measurement_id,
                TaskRef {
                    resource_key: a.resource_key.clone(),
                    task_type: a.task_type,
                },
            )
        })
        .collect()
}

#[derive(Debug)]
struct KeyGroup {
    key: String,
    tasks: Vec<MeasurementTask>,
    /// Offset of the head task for the current pin.
    rotation: usize,
    pins: usize,
}

impl KeyGroup {
    fn first_eligible(&self, ctx: &ClientContext) -> Option<&MeasurementTask> {
        let len = self.tasks.len();
        (0..len)
            .map(|i| &self.tasks[(self.rotation + i) % len])
            .find(|t| t.task_type.runs_on(ctx.browser_family))
    }

    /// Has a task every browser family can run.
    fn is_universal(&self) -> bool {
        self.tasks.iter().any(|t| t.task_type != TaskType::Script)
    }
}

#[derive(Debug)]
pub struct Scheduler {
    cfg: ScheduleConfig,
    groups: Vec<KeyGroup>,
    cursor: usize,
    window: Option<i64>,
    pinned: Option<usize>,
    budget_used: HashMap<String, u32>,
    issued: HashSet<Uuid>,
    log: Vec<Assignment>,
}

impl Scheduler {
    pub fn new(tasks: Vec<MeasurementTask>, cfg: ScheduleConfig) -> Result<Self, DomainError> {
        let mut groups: Vec<KeyGroup> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for task in tasks {
            let key = task.resource_key()?;
            let slot = *index.entry(key.clone()).or_insert_with(|| {
                groups.push(KeyGroup {
                    key,
                    tasks: Vec::new(),
                    rotation: 0,
                    pins: 0,
                });
                groups.len() - 1
            });
            groups[slot].tasks.push(task);
        }
        Ok(Scheduler {
            cfg,
            groups,
            cursor: 0,
            window: None,
            pinned: None,
            budget_used: HashMap::new(),
            issued: HashSet::new(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.log
    }

    pub fn task_count(&self) -> usize {
        self.groups.iter().map(|g| g.tasks.len()).sum()
    }

    fn window_of(&self, now: DateTime<Utc>) -> i64 {
        now.timestamp().div_euclid(self.cfg.batch_window_secs.max(1) as i64)
    }

    /// Next group from the cursor satisfying `pred`, in round-robin order.
    fn find_group(&self, pred: impl Fn(&KeyGroup) -> bool) -> Option<usize> {
        let len = self.groups.len();
        (0..len)
            .map(|i| (self.cursor + i) % len)
            .find(|&i| pred(&self.groups[i]))
    }

    fn fresh_id(&mut self) -> Uuid {
        loop {
            let id = Uuid::new_v4();
            if self.issued.insert(id) {
                return id;
            }
        }
    }

    pub fn next_task(&mut self, ctx: &ClientContext, now: DateTime<Utc>) -> TaskDescriptor {
        let window = self.window_of(now);
        if self.window != Some(window) {
            self.window = Some(window);
            self.pinned = None;
            self.budget_used.clear();
        }
        if self.groups.is_empty() {
            return TaskDescriptor::Noop;
        }
        let used = self.budget_used.get(&ctx.client_id).copied().unwrap_or(0);
        if used >= self.cfg.per_client_budget {
            return TaskDescriptor::Noop;
        }

        let can_run = |g: &KeyGroup| g.first_eligible(ctx).is_some();
        let group = match self.pinned {
            Some(p) if can_run(&self.groups[p]) => Some(p),
            Some(_) => self.find_group(can_run),
            None => {
                // Prefer a key every browser can measure, so that later
                // clients in this window can share it.
                let pick = self
                    .find_group(|g| g.is_universal() && can_run(g))
                    .or_else(|| self.find_group(can_run));
                if let Some(p) = pick {
                    self.pinned = Some(p);
                    self.cursor = (p + 1) % self.groups.len();
                    let g = &mut self.groups[p];
                    g.rotation = g.pins % g.tasks.len();
                    g.pins += 1;
                }
                pick
            }
        };
        let Some(group) = group else {
            return TaskDescriptor::Noop;
        };

        let template = self.groups[group]
            .first_eligible(ctx)
            .expect("group chosen for eligibility")
            .clone();
        let key = self.groups[group].key.clone();
        let id = self.fresh_id();
        let mut task = template;
        task.measurement_id = id;
        self.log.push(Assignment {
            measurement_id: id,
            client_id: ctx.client_id.clone(),
            issued_at: now,
            resource_key: key,
            task_type: task.task_type,
            region: ctx.region,
            window,
        });
        *self.budget_used.entry(ctx.client_id.clone()).or_default() += 1;
        TaskDescriptor::Task(task)
    }
}
