//! Value types shared by task generation, scheduling, collection and
//! inference.

mod pattern;
mod region;
mod task;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;
use uuid::Uuid;

pub use pattern::{PatternKind, TargetPattern};
pub use region::Region;
pub use task::{MeasurementTask, StyleProbe, TaskDescriptor, TaskType};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("malformed url {url:?}: {reason}")]
    Url { url: String, reason: String },
    #[error("invalid region code {0:?}")]
    InvalidRegion(String),
    #[error("invalid target pattern {0:?}: {1}")]
    Pattern(String, &'static str),
    #[error("invalid detection config: {0}")]
    Config(&'static str),
}

pub(crate) fn parse_absolute(raw: &str) -> Result<Url, DomainError> {
    let url = Url::parse(raw.trim()).map_err(|e| DomainError::Url {
        url: raw.to_string(),
        reason: e.to_string(),
    })?;
    if url.host_str().is_none_or(str::is_empty) {
        return Err(DomainError::Url {
            url: raw.to_string(),
            reason: "no host".into(),
        });
    }
    Ok(url)
}

/// Aggregation key for a measured resource: lowercase scheme and host,
/// default port elided, path kept, query and fragment dropped.
pub fn canonicalize_resource_key(raw: &str) -> Result<String, DomainError> {
    let url = parse_absolute(raw)?;
    // `Url` already lowercases scheme/host and elides default ports.
    let mut key = format!("{}://{}", url.scheme(), url.host_str().unwrap_or_default());
    if let Some(port) = url.port() {
        key.push(':');
        key.push_str(&port.to_string());
    }
    key.push_str(url.path());
    Ok(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrowserFamily {
    Chrome,
    Firefox,
    Safari,
    Other,
}

impl BrowserFamily {
    /// Classifies a User-Agent string. Chromium derivatives (Edge, Opera,
    /// Brave) report a `Chrome/` token and count as Chrome.
    pub fn from_user_agent(ua: &str) -> Self {
        if ua.contains("Firefox/") || ua.contains("FxiOS/") {
            BrowserFamily::Firefox
        } else if ua.contains("Chrome/") || ua.contains("Chromium/") || ua.contains("CriOS/") {
            BrowserFamily::Chrome
        } else if ua.contains("Safari/") {
            BrowserFamily::Safari
        } else {
            BrowserFamily::Other
        }
    }
}

impl FromStr for BrowserFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "chrome" => Ok(Self::Chrome),
            "firefox" => Ok(Self::Firefox),
            "safari" => Ok(Self::Safari),
            "other" => Ok(Self::Other),
            _ => Err(format!("unknown browser family {s:?}")),
        }
    }
}

impl fmt::Display for BrowserFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Chrome => "chrome",
            Self::Firefox => "firefox",
            Self::Safari => "safari",
            Self::Other => "other",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientContext {
    /// Hashed source address, never the address itself.
    pub client_id: String,
    pub region: Region,
    pub browser_family: BrowserFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_site: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultState {
    Init,
    Success,
    Failure,
}

impl ResultState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, ResultState::Init)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Init => "init",
            Self::Success => "success",
            Self::Failure => "failure",
        }
    }
}

impl FromStr for ResultState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "init" => Ok(Self::Init),
            "success" => Ok(Self::Success),
            "failure" => Ok(Self::Failure),
            other => Err(format!("unknown result state {other:?}")),
        }
    }
}

impl fmt::Display for ResultState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MeasurementResult {
    pub measurement_id: Uuid,
    pub state: ResultState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    pub received_at: DateTime<Utc>,
    pub context: ClientContext,
}

/// Per resource and region counts: `n` measurements, `x` of them successful.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegionStats {
    pub resource_key: String,
    pub region: Region,
    #[serde(rename = "n_r")]
    pub n: u64,
    #[serde(rename = "x_r")]
    pub x: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionConfig {
    /// Success probability of an unfiltered measurement under the null.
    pub p: f64,
    pub alpha: f64,
    pub min_samples: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            p: 0.7,
            alpha: 0.05,
            min_samples: 5,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(DomainError::Config("p must lie in (0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DomainError::Config("alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    /// Fails the null here and nowhere else.
    Filtered,
    PassesNull,
    /// Fails the null here, but at least one comparison region fails too.
    FailsInOtherRegions,
    InsufficientData,
    InsufficientComparisonRegions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonRegion {
    pub region: Region,
    pub p_value: f64,
    #[serde(rename = "n_r")]
    pub n: u64,
    #[serde(rename = "x_r")]
    pub x: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilteringVerdict {
    pub resource_key: String,
    pub region: Region,
    pub p_value: f64,
    pub flagged: bool,
    pub reason: VerdictReason,
    #[serde(rename = "n_r")]
    pub n: u64,
    #[serde(rename = "x_r")]
    pub x: u64,
    pub comparison_regions: Vec<ComparisonRegion>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_key_normalizes_case_port_and_query() {
        assert_eq!(
            canonicalize_resource_key("HTTP://Example.COM:80/a?x=1").unwrap(),
            "http://example.com/a"
        );
        assert_eq!(
            canonicalize_resource_key("https://t.co/abc").unwrap(),
            "https://t.co/abc"
        );
        assert_eq!(
            canonicalize_resource_key("https://h.org:8443/p/q.png#frag").unwrap(),
            "https://h.org:8443/p/q.png"
        );
    }

    #[test]
    fn canonical_key_rejects_malformed_input() {
        assert!(matches!(
            canonicalize_resource_key("not a url"),
            Err(DomainError::Url { .. })
        ));
        assert!(canonicalize_resource_key("mailto:a@b.c").is_err());
    }

    proptest::proptest! {
        #[test]
        fn canonicalization_is_idempotent(
            scheme in "(http|https|HTTP|HtTpS)",
            host in "[a-zA-Z][a-zA-Z0-9]{0,10}\\.(com|org|CN)",
            port in proptest::option::of(1u16..65535),
            path in "(/[a-zA-Z0-9._~-]{0,8}){0,4}",
            query in proptest::option::of("[a-z0-9=&]{0,12}"),
        ) {
            let mut raw = format!("{scheme}://{host}");
            if let Some(p) = port {
                raw.push_str(&format!(":{p}"));
            }
            raw.push_str(&path);
            if let Some(q) = query {
                raw.push('?');
                raw.push_str(&q);
            }
            let once = canonicalize_resource_key(&raw).unwrap();
            proptest::prop_assert_eq!(canonicalize_resource_key(&once).unwrap(), once.clone());
            proptest::prop_assert!(!once.contains('?'));
        }
    }

    #[test]
    fn user_agent_sniffing() {
        let chrome =
            "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0.0.0 Safari/537.36";
        let firefox = "Mozilla/5.0 (X11; Linux x86_64; rv:121.0) Gecko/20100101 Firefox/121.0";
        let safari = "Mozilla/5.0 (Macintosh; Intel Mac OS X 14_2) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.2 Safari/605.1.15";
        let edge = "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0.0.0 Safari/537.36 Edg/120.0.0.0";
        assert_eq!(BrowserFamily::from_user_agent(chrome), BrowserFamily::Chrome);
        assert_eq!(BrowserFamily::from_user_agent(edge), BrowserFamily::Chrome);
        assert_eq!(BrowserFamily::from_user_agent(firefox), BrowserFamily::Firefox);
        assert_eq!(BrowserFamily::from_user_agent(safari), BrowserFamily::Safari);
        assert_eq!(BrowserFamily::from_user_agent("curl/8.0"), BrowserFamily::Other);
    }

    #[test]
    fn detection_config_bounds() {
        assert!(DetectionConfig::default().validate().is_ok());
        let bad = DetectionConfig {
            p: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DetectionConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn region_stats_wire_names() {
        let s = RegionStats {
            resource_key: "http://a.com/x".into(),
            region: "PK".parse().unwrap(),
            n: 10,
            x: 3,
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"resourceKey":"http://a.com/x","region":"PK","n_r":10,"x_r":3}"#
        );
    }
}
