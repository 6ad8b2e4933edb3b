use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use super::{canonicalize_resource_key, BrowserFamily, DomainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TaskType {
    Image,
    StyleSheet,
    InlineFrame,
    Script,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Image,
        TaskType::StyleSheet,
        TaskType::InlineFrame,
        TaskType::Script,
    ];

    /// Script loads only report `onload` for any 200 response on Chrome.
    pub fn runs_on(self, browser: BrowserFamily) -> bool {
        self != TaskType::Script || browser == BrowserFamily::Chrome
    }

    /// Types whose client reports an explicit load/error event, as opposed
    /// to the timing channel of inline frames.
    pub fn has_explicit_feedback(self) -> bool {
        self != TaskType::InlineFrame
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::Image => "image",
            TaskType::StyleSheet => "styleSheet",
            TaskType::InlineFrame => "inlineFrame",
            TaskType::Script => "script",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StyleProbe {
    pub selector: String,
    pub property: String,
    pub expected_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MeasurementTask {
    pub measurement_id: Uuid,
    pub task_type: TaskType,
    pub resource_url: String,
    /// The framed page, for inline-frame tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_probe: Option<StyleProbe>,
    pub max_bytes: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_review: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub script_safe: bool,
}

impl MeasurementTask {
    pub fn resource_key(&self) -> Result<String, DomainError> {
        canonicalize_resource_key(&self.resource_url)
    }

    /// Structural invariants that do not need the source HAR document.
    pub fn is_well_formed(&self) -> bool {
        match self.task_type {
            TaskType::InlineFrame => self.page_url.is_some(),
            TaskType::StyleSheet => self.style_probe.is_some(),
            _ => true,
        }
    }
}

/// What the coordinator hands a client: a task, or nothing to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskDescriptor {
    Task(MeasurementTask),
    Noop,
}

impl TaskDescriptor {
    pub fn task(&self) -> Option<&MeasurementTask> {
        match self {
            TaskDescriptor::Task(t) => Some(t),
            TaskDescriptor::Noop => None,
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            TaskDescriptor::Task(t) => serde_json::to_string(t).expect("task serializes"),
            TaskDescriptor::Noop => r#"{"taskType":"noop"}"#.to_string(),
        }
    }

    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        let value: Value = serde_json::from_str(raw)?;
        if value.get("taskType").and_then(Value::as_str) == Some("noop") {
            return Ok(TaskDescriptor::Noop);
        }
        serde_json::from_value(value).map(TaskDescriptor::Task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_task() -> MeasurementTask {
        MeasurementTask {
            measurement_id: Uuid::nil(),
            task_type: TaskType::Image,
            resource_url: "http://a.com/favicon.ico".into(),
            page_url: None,
            style_probe: None,
            max_bytes: 512,
            needs_review: false,
            script_safe: false,
        }
    }

    #[test]
    fn script_is_chrome_only() {
        assert!(TaskType::Script.runs_on(BrowserFamily::Chrome));
        assert!(!TaskType::Script.runs_on(BrowserFamily::Firefox));
        assert!(!TaskType::Script.runs_on(BrowserFamily::Other));
        assert!(TaskType::Image.runs_on(BrowserFamily::Safari));
    }

    #[test]
    fn noop_descriptor_is_exact() {
        assert_eq!(TaskDescriptor::Noop.to_json(), r#"{"taskType":"noop"}"#);
        assert_eq!(
            TaskDescriptor::from_json(r#"{"taskType":"noop"}"#).unwrap(),
            TaskDescriptor::Noop
        );
    }

    #[test]
    fn task_descriptor_json_round_trip() {
        let d = TaskDescriptor::Task(image_task());
        let json = d.to_json();
        assert!(json.contains(r#""taskType":"image""#));
        assert!(!json.contains("pageUrl"));
        assert_eq!(TaskDescriptor::from_json(&json).unwrap(), d);
    }

    #[test]
    fn well_formedness() {
        let mut t = image_task();
        assert!(t.is_well_formed());
        t.task_type = TaskType::InlineFrame;
        assert!(!t.is_well_formed());
        t.page_url = Some("http://a.com/".into());
        assert!(t.is_well_formed());
        t.task_type = TaskType::StyleSheet;
        assert!(!t.is_well_formed());
    }
}
