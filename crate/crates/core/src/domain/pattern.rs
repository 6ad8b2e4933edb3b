use std::fmt;

use serde::{Deserialize, Serialize};
use url::Url;

use super::{parse_absolute, DomainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternKind {
    ExactUrl,
    DomainWildcard,
    PrefixWildcard,
}

/// A measurement target: one URL, every URL on a host, or every URL under
/// a string prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetPattern {
    kind: PatternKind,
    value: String,
}

impl TargetPattern {
    pub fn exact(raw: &str) -> Result<Self, DomainError> {
        let url = parse_absolute(raw)?;
        Ok(Self {
            kind: PatternKind::ExactUrl,
            value: url.to_string(),
        })
    }

    /// Accepts a bare host (`foo.com`) or any absolute URL on that host.
    pub fn domain(raw: &str) -> Result<Self, DomainError> {
        let raw = raw.trim();
        let url = if raw.contains("://") {
            parse_absolute(raw)?
        } else {
            parse_absolute(&format!("http://{raw}/"))?
        };
        if url.query().is_some() {
            return Err(DomainError::Pattern(raw.into(), "wildcards take no query string"));
        }
        Ok(Self {
            kind: PatternKind::DomainWildcard,
            value: format!("{}://{}/", url.scheme(), url.host_str().unwrap_or_default()),
        })
    }

    pub fn prefix(raw: &str) -> Result<Self, DomainError> {
        let raw = raw.trim();
        let url = parse_absolute(raw)?;
        if url.query().is_some() || raw.contains('?') {
            return Err(DomainError::Pattern(raw.into(), "wildcards take no query string"));
        }
        Ok(Self {
            kind: PatternKind::PrefixWildcard,
            value: raw.to_string(),
        })
    }

    /// Parses one line of a target list: `=URL`, `D host` or `P prefix`.
    /// Blank lines and `#` comments yield `None`.
    pub fn parse_line(line: &str) -> Option<Result<Self, DomainError>> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        Some(if let Some(rest) = line.strip_prefix('=') {
            Self::exact(rest)
        } else if let Some(rest) = line.strip_prefix("D ") {
            Self::domain(rest)
        } else if let Some(rest) = line.strip_prefix("P ") {
            Self::prefix(rest)
        } else {
            Err(DomainError::Pattern(line.into(), "expected '=', 'D ' or 'P ' prefix"))
        })
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    fn host(&self) -> Option<String> {
        Url::parse(&self.value)
            .ok()
            .and_then(|u| u.host_str().map(str::to_owned))
    }

    pub fn matches(&self, candidate: &str) -> bool {
        match self.kind {
            PatternKind::ExactUrl => Url::parse(candidate.trim())
                .map(|u| u.as_str() == self.value)
                .unwrap_or(false),
            PatternKind::DomainWildcard => {
                let Ok(url) = Url::parse(candidate.trim()) else {
                    return false;
                };
                url.host_str().is_some() && url.host_str().map(str::to_owned) == self.host()
            }
            PatternKind::PrefixWildcard => candidate.starts_with(&self.value),
        }
    }
}

impl fmt::Display for TargetPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PatternKind::ExactUrl => write!(f, "={}", self.value),
            PatternKind::DomainWildcard => {
                write!(f, "D {}", self.host().unwrap_or_default())
            }
            PatternKind::PrefixWildcard => write!(f, "P {}", self.value),
        }
    }
}
