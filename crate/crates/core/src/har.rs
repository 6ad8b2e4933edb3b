//! HTTP Archive 1.2 ingestion.

use chrono::DateTime;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarError {
    #[error("invalid JSON: {0}")]
    Json(serde_json::Error),
    #[error("not a HAR 1.2 document: {0}")]
    Schema(String),
}

impl From<serde_json::Error> for HarError {
    fn from(e: serde_json::Error) -> Self {
        match e.classify() {
            serde_json::error::Category::Data => HarError::Schema(e.to_string()),
            _ => HarError::Json(e),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawHar {
    log: RawLog,
}

#[derive(Debug, Deserialize)]
struct RawLog {
    #[serde(default)]
    pages: Vec<RawPage>,
    entries: Vec<RawEntry>,
}

#[derive(Debug, Deserialize)]
struct RawPage {
    id: String,
    #[serde(default)]
    title: String,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    #[serde(default)]
    pageref: Option<String>,
    request: RawRequest,
    response: RawResponse,
}

#[derive(Debug, Deserialize)]
struct RawRequest {
    url: String,
}

#[derive(Debug, Deserialize)]
struct RawResponse {
    status: i64,
    #[serde(default)]
    headers: Vec<RawHeader>,
    content: RawContent,
}

#[derive(Debug, Deserialize)]
struct RawHeader {
    name: String,
    value: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawContent {
    size: i64,
    #[serde(default)]
    mime_type: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    encoding: Option<String>,
}

/// One recorded resource load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarEntry {
    pub url: String,
    pub status: u16,
    /// Lowercased essence, parameters stripped.
    pub mime_type: String,
    pub body_size: u64,
    pub cacheable: bool,
    pub is_image: bool,
    /// `X-Content-Type-Options: nosniff` was present.
    pub nosniff: bool,
    /// Decoded body text, kept for style sheets only.
    pub text: Option<String>,
}

impl HarEntry {
    /// Builds an entry, deriving the flags from MIME type and headers.
    pub fn new(url: &str, status: u16, mime_type: &str, body_size: u64, headers: &[(&str, &str)]) -> Self {
        let mime = mime_essence(mime_type);
        HarEntry {
            url: url.to_string(),
            status,
            is_image: mime.starts_with("image/"),
            mime_type: mime,
            body_size,
            cacheable: is_cacheable(headers.iter().copied()),
            nosniff: headers.iter().any(|(n, v)| {
                n.eq_ignore_ascii_case("x-content-type-options") && v.trim().eq_ignore_ascii_case("nosniff")
            }),
            text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

fn mime_essence(raw: &str) -> String {
    raw.split(';').next().unwrap_or("").trim().to_ascii_lowercase()
}

/// Browser cacheability from response headers: `no-store`/`no-cache` always
/// win; then a positive `max-age`/`s-maxage`, `public`/`immutable`, or a
/// future `Expires` make the response cacheable.
pub fn is_cacheable<'a>(headers: impl Iterator<Item = (&'a str, &'a str)> + Clone) -> bool {
    let find = |name: &str| {
        headers
            .clone()
            .filter(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.to_ascii_lowercase())
            .collect::<Vec<_>>()
    };
    let cache_control = find("cache-control").join(",");
    let directives: Vec<&str> = cache_control
        .split(',')
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .collect();
    if directives.iter().any(|d| *d == "no-store" || *d == "no-cache") {
        return false;
    }
    if directives.is_empty() && find("pragma").iter().any(|p| p.contains("no-cache")) {
        return false;
    }
    for d in &directives {
        let age = d.strip_prefix("max-age=").or_else(|| d.strip_prefix("s-maxage="));
        if let Some(age) = age {
            return age.trim_matches('"').parse::<i64>().map(|a| a > 0).unwrap_or(false);
        }
    }
    if directives.iter().any(|d| *d == "public" || *d == "immutable") {
        return true;
    }
    let expires = find("expires");
    let Some(expires) = expires.first() else {
        return false;
    };
    let Ok(expires) = DateTime::parse_from_rfc2822(expires.trim()) else {
        // Invalid dates such as "0" or "-1" mean already expired.
        return false;
    };
    match find("date")
        .first()
        .and_then(|d| DateTime::parse_from_rfc2822(d.trim()).ok())
    {
        Some(date) => expires > date,
        None => true,
    }
}

/// The resources one page load fetched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarDocument {
    page_url: String,
    entries: Vec<HarEntry>,
    total_bytes: u64,
    diagnostics: Vec<String>,
}

impl HarDocument {
    pub fn new(page_url: impl Into<String>, entries: Vec<HarEntry>) -> Self {
        let total_bytes = entries.iter().map(|e| e.body_size).sum();
        HarDocument {
            page_url: page_url.into(),
            entries,
            total_bytes,
            diagnostics: Vec::new(),
        }
    }

    pub fn page_url(&self) -> &str {
        &self.page_url
    }

    pub fn entries(&self) -> &[HarEntry] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Host of the page URL, used to group documents by domain.
    pub fn domain(&self) -> Option<String> {
        url::Url::parse(&self.page_url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_owned))
    }
}

fn convert_entry(raw: RawEntry, diagnostics: &mut Vec<String>) -> Option<HarEntry> {
    let status = match u16::try_from(raw.response.status) {
        Ok(s) if (100..=599).contains(&s) => s,
        _ => {
            diagnostics.push(format!(
                "{}: status {} outside 100..=599, entry skipped",
                raw.request.url, raw.response.status
            ));
            return None;
        }
    };
    let size = if raw.response.content.size < 0 {
        diagnostics.push(format!(
            "{}: negative size {} clamped to 0",
            raw.request.url, raw.response.content.size
        ));
        0
    } else {
        raw.response.content.size as u64
    };
    let headers: Vec<(&str, &str)> = raw
        .response
        .headers
        .iter()
        .map(|h| (h.name.as_str(), h.value.as_str()))
        .collect();
    let mut entry = HarEntry::new(
        &raw.request.url,
        status,
        &raw.response.content.mime_type,
        size,
        &headers,
    );
    // Base64 bodies are binary; only plain-text style sheets are kept.
    if entry.mime_type == "text/css" && raw.response.content.encoding.is_none() {
        entry.text = raw.response.content.text;
    }
    Some(entry)
}

/// Parses a HAR 1.2 log into one document per recorded page. Without a
/// `pages` list the whole log is one page, named by its first request.
pub fn ingest_har(raw: &[u8]) -> Result<Vec<HarDocument>, HarError> {
    let har: RawHar = serde_json::from_slice(raw)?;
    let RawLog { pages, entries } = har.log;

    if pages.is_empty() {
        let mut diagnostics = Vec::new();
        let Some(page_url) = entries.first().map(|e| e.request.url.clone()) else {
            return Ok(Vec::new());
        };
        let converted = entries
            .into_iter()
            .filter_map(|e| convert_entry(e, &mut diagnostics))
            .collect();
        let mut doc = HarDocument::new(page_url, converted);
        doc.diagnostics = diagnostics;
        return Ok(vec![doc]);
    }

    let mut buckets: Vec<Vec<RawEntry>> = pages.iter().map(|_| Vec::new()).collect();
    let mut orphans = 0usize;
    for entry in entries {
        let idx = match &entry.pageref {
            Some(r) => pages.iter().position(|p| &p.id == r),
            // An entry without a page reference belongs to the only page, if any.
            None if pages.len() == 1 => Some(0),
            None => None,
        };
        match idx {
            Some(i) => buckets[i].push(entry),
            None => orphans += 1,
        }
    }

    let mut docs = Vec::with_capacity(pages.len());
    for (page, bucket) in pages.into_iter().zip(buckets) {
        let mut diagnostics = Vec::new();
        if orphans > 0 && docs.is_empty() {
            diagnostics.push(format!("{orphans} entries reference no known page and were skipped"));
        }
        let page_url = if url::Url::parse(&page.title).is_ok() {
            page.title
        } else if let Some(first) = bucket.first() {
            first.request.url.clone()
        } else {
            continue;
        };
        let converted = bucket
            .into_iter()
            .filter_map(|e| convert_entry(e, &mut diagnostics))
            .collect();
        let mut doc = HarDocument::new(page_url, converted);
        doc.diagnostics = diagnostics;
        docs.push(doc);
    }
    Ok(docs)
}
