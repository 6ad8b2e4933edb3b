//! Target pattern expansion and per-document task generation.

mod feasibility;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::css;
use crate::domain::{parse_absolute, MeasurementTask, PatternKind, TargetPattern, TaskType};
use crate::har::{HarDocument, HarEntry};

pub use feasibility::{feasibility_stats, FeasibilityReport, FeasibilityRow, Metric, MIDSIZE_PAGE_BYTES};

/// Namespace for deterministic task identifiers.
const TASK_NAMESPACE: Uuid = Uuid::from_u128(0x5c1f_3a0e_77b2_4d8e_9a41_0f6d_2b7c_e913);

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },
    #[error("invalid limits: {0}")]
    Limits(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TaskGenLimits {
    pub image_max_bytes: u64,
    pub image_relaxed_max_bytes: u64,
    pub page_max_bytes: u64,
    pub max_urls_per_pattern: usize,
    pub forbidden_mime_prefixes: Vec<String>,
}

impl Default for TaskGenLimits {
    fn default() -> Self {
        TaskGenLimits {
            image_max_bytes: 1024,
            image_relaxed_max_bytes: 5 * 1024,
            page_max_bytes: 100 * 1024,
            max_urls_per_pattern: 50,
            forbidden_mime_prefixes: vec!["video/".into(), "application/x-shockwave-flash".into(), "audio/".into()],
        }
    }
}

impl TaskGenLimits {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.image_max_bytes > self.image_relaxed_max_bytes {
            return Err(TaskGenError::Limits("imageMaxBytes exceeds imageRelaxedMaxBytes"));
        }
        if self.image_relaxed_max_bytes >= self.page_max_bytes {
            return Err(TaskGenError::Limits("imageRelaxedMaxBytes must be below pageMaxBytes"));
        }
        Ok(())
    }

    fn is_forbidden(&self, mime: &str) -> bool {
        self.forbidden_mime_prefixes
            .iter()
            .any(|p| mime.starts_with(p.as_str()))
    }
}

/// Local stand-in for search-engine discovery of URLs matching a pattern.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UrlCorpus {
    urls: BTreeSet<String>,
}

impl UrlCorpus {
    pub fn new<I, S>(urls: I) -> Result<Self, TaskGenError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for (i, u) in urls.into_iter().enumerate() {
            let u = u.as_ref().trim();
            parse_absolute(u).map_err(|e| TaskGenError::Corpus {
                line: i + 1,
                reason: e.to_string(),
            })?;
            set.insert(u.to_string());
        }
        Ok(UrlCorpus { urls: set })
    }

    /// One URL per line; blank lines and `#` comments are ignored.
    pub fn from_lines(text: &str) -> Result<Self, TaskGenError> {
        let mut set = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            parse_absolute(line).map_err(|e| TaskGenError::Corpus {
                line: i + 1,
                reason: e.to_string(),
            })?;
            set.insert(line.to_string());
        }
        Ok(UrlCorpus { urls: set })
    }

    pub fn len(&self) -> usize {
        self.urls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.urls.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.urls.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub urls: Vec<String>,
    pub diagnostic: Option<String>,
}

fn pattern_seed(pattern: &TargetPattern, seed: u64) -> u64 {
    let digest = Sha256::digest(pattern.to_string().as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(head)
}

/// Expands a pattern to concrete URLs. Exact URLs need no corpus; wildcards
/// draw a seeded sample of at most `max_urls_per_pattern` corpus matches,
/// returned in corpus order.
pub fn expand_pattern(pattern: &TargetPattern, corpus: &UrlCorpus, limits: &TaskGenLimits, seed: u64) -> Expansion {
    if pattern.kind() == PatternKind::ExactUrl {
        return Expansion {
            urls: vec![pattern.value().to_string()],
            diagnostic: None,
        };
    }
    let matches: Vec<&str> = corpus.iter().filter(|u| pattern.matches(u)).collect();
    if matches.is_empty() {
        let diagnostic = format!("pattern {pattern} matched no corpus URL");
        tracing::warn!("{diagnostic}");
        return Expansion {
            urls: Vec::new(),
            diagnostic: Some(diagnostic),
        };
    }
    let limit = limits.max_urls_per_pattern;
    if matches.len() <= limit {
        return Expansion {
            urls: matches.into_iter().map(str::to_owned).collect(),
            diagnostic: None,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed(pattern, seed));
    let mut picked = index::sample(&mut rng, matches.len(), limit).into_vec();
    picked.sort_unstable();
    Expansion {
        urls: picked.into_iter().map(|i| matches[i].to_string()).collect(),
        diagnostic: None,
    }
}

fn is_web_url(raw: &str) -> bool {
    parse_absolute(raw)
        .map(|u| matches!(u.scheme(), "http" | "https"))
        .unwrap_or(false)
}

fn task_id(doc: &HarDocument, ordinal: usize, kind: TaskType, url: &str) -> Uuid {
    let name = format!("{}|{}|{}|{}", doc.page_url(), ordinal, kind, url);
    Uuid::new_v5(&TASK_NAMESPACE, name.as_bytes())
}

fn base_task(doc: &HarDocument, ordinal: usize, kind: TaskType, entry: &HarEntry) -> MeasurementTask {
    MeasurementTask {
        measurement_id: task_id(doc, ordinal, kind, &entry.url),
        task_type: kind,
        resource_url: entry.url.clone(),
        page_url: None,
        style_probe: None,
        max_bytes: entry.body_size,
        needs_review: false,
        script_safe: false,
    }
}

/// The smallest cacheable, renderable image a page embeds.
pub fn smallest_cacheable_image(doc: &HarDocument) -> Option<&HarEntry> {
    doc.entries()
        .iter()
        .filter(|e| e.is_image && e.cacheable && e.status == 200 && e.body_size > 0 && is_web_url(&e.url))
        .min_by_key(|e| e.body_size)
}

/// Whether a page qualifies for the inline-frame timing task.
pub fn inline_frame_eligible(doc: &HarDocument, limits: &TaskGenLimits) -> bool {
    is_web_url(doc.page_url())
        && doc.total_bytes() <= limits.page_max_bytes
        && !doc.entries().iter().any(|e| limits.is_forbidden(&e.mime_type))
        && smallest_cacheable_image(doc).is_some()
}

/// Every measurement task a recorded page supports, in a fixed order:
/// small images, style sheets, at most one inline frame, then scripts.
pub fn generate_tasks(doc: &HarDocument, limits: &TaskGenLimits) -> Vec<MeasurementTask> {
    let mut tasks = Vec::new();
    let web_entries: Vec<(usize, &HarEntry)> = doc
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| is_web_url(&e.url))
        .collect();

    for &(i, e) in &web_entries {
        if e.is_image && e.status == 200 && e.body_size > 0 && e.body_size <= limits.image_max_bytes {
            tasks.push(base_task(doc, i, TaskType::Image, e));
        }
    }

    for &(i, e) in &web_entries {
        if e.mime_type == "text/css" && e.status == 200 && e.body_size > 0 {
            let Some(probe) = e.text.as_deref().and_then(css::extract_probe) else {
                tracing::debug!(url = %e.url, "style sheet without a usable probe rule");
                continue;
            };
            let mut task = base_task(doc, i, TaskType::StyleSheet, e);
            task.style_probe = Some(probe);
            tasks.push(task);
        }
    }

    if inline_frame_eligible(doc, limits) {
        let image = smallest_cacheable_image(doc).expect("checked by eligibility");
        let ordinal = doc.entries().len();
        let mut task = base_task(doc, ordinal, TaskType::InlineFrame, image);
        task.page_url = Some(doc.page_url().to_string());
        task.max_bytes = doc.total_bytes();
        // Framed pages go live only after a human has looked at them.
        task.needs_review = true;
        tasks.push(task);
    }

    for &(i, e) in &web_entries {
        if e.status == 200 {
            let mut task = base_task(doc, i, TaskType::Script, e);
            task.script_safe = e.nosniff;
            tasks.push(task);
        }
    }

    tasks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn png(url: &str, size: u64, cache: bool) -> HarEntry {
        let headers: &[(&str, &str)] = if cache {
            &[("Cache-Control", "max-age=86400")]
        } else {
            &[("Cache-Control", "no-store")]
        };
        HarEntry::new(url, 200, "image/png", size, headers)
    }

    fn html(url: &str, size: u64) -> HarEntry {
        HarEntry::new(url, 200, "text/html", size, &[])
    }

    #[test]
    fn exact_pattern_expands_to_itself() {
        let p = TargetPattern::exact("http://a.com/p").unwrap();
        let e = expand_pattern(&p, &UrlCorpus::default(), &TaskGenLimits::default(), 0);
        assert_eq!(e.urls, vec!["http://a.com/p".to_string()]);
    }

    #[test]
    fn domain_pattern_samples_fifty() {
        let mut urls: Vec<String> = (0..120).map(|i| format!("http://foo.com/page{i}")).collect();
        urls.extend((0..30).map(|i| format!("http://bar.com/page{i}")));
        let corpus = UrlCorpus::new(&urls).unwrap();
        let p = TargetPattern::domain("foo.com").unwrap();
        let limits = TaskGenLimits::default();
        let e = expand_pattern(&p, &corpus, &limits, 7);
        assert_eq!(e.urls.len(), 50);
        assert!(e.urls.iter().all(|u| u.starts_with("http://foo.com/")));
        let distinct: BTreeSet<_> = e.urls.iter().collect();
        assert_eq!(distinct.len(), 50);
        assert_eq!(expand_pattern(&p, &corpus, &limits, 7), e);
        assert_ne!(expand_pattern(&p, &corpus, &limits, 8).urls, e.urls);
    }

    #[test]
    fn unmatched_wildcard_is_empty_with_diagnostic() {
        let corpus = UrlCorpus::new(["http://foo.com/a"]).unwrap();
        let p = TargetPattern::domain("nomatch.example").unwrap();
        let e = expand_pattern(&p, &corpus, &TaskGenLimits::default(), 0);
        assert!(e.urls.is_empty());
        assert!(e.diagnostic.is_some());
    }

    #[test]
    fn corpus_rejects_relative_urls() {
        assert!(UrlCorpus::from_lines("http://a.com/\n/relative\n").is_err());
        let c = UrlCorpus::from_lines("# c\nhttp://a.com/\n\nhttp://a.com/\n").unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn limits_validation() {
        assert!(TaskGenLimits::default().validate().is_ok());
        let bad = TaskGenLimits {
            image_relaxed_max_bytes: 200 * 1024,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_png_yields_image_task() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![html("http://a.com/", 2000), png("http://a.com/i.png", 900, false)],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        let images: Vec<_> = tasks.iter().filter(|t| t.task_type == TaskType::Image).collect();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].resource_url, "http://a.com/i.png");
        // no cacheable image, so no inline frame
        assert!(tasks.iter().all(|t| t.task_type != TaskType::InlineFrame));
    }

    #[test]
    fn large_page_gets_no_inline_frame() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![
                html("http://a.com/", 2 * 1024 * 1024),
                png("http://a.com/i.png", 500, true),
            ],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        assert!(tasks.iter().all(|t| t.task_type != TaskType::InlineFrame));
    }

    #[test]
    fn empty_document_yields_nothing() {
        let doc = HarDocument::new("http://a.com/", vec![]);
        assert!(generate_tasks(&doc, &TaskGenLimits::default()).is_empty());
    }

    #[test]
    fn inline_frame_picks_smallest_cacheable_image() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![
                html("http://a.com/", 5000),
                png("http://a.com/big.png", 4000, true),
                png("http://a.com/tiny.png", 300, false),
                png("http://a.com/small.png", 800, true),
            ],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        let frames: Vec<_> = tasks.iter().filter(|t| t.task_type == TaskType::InlineFrame).collect();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].resource_url, "http://a.com/small.png");
        assert_eq!(frames[0].page_url.as_deref(), Some("http://a.com/"));
        assert!(frames[0].needs_review);
        assert_eq!(frames[0].max_bytes, 10_100);
    }

    #[test]
    fn forbidden_mime_blocks_inline_frame() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![
                html("http://a.com/", 5000),
                png("http://a.com/small.png", 800, true),
                HarEntry::new("http://a.com/clip.mp4", 200, "video/mp4", 10, &[]),
            ],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        assert!(tasks.iter().all(|t| t.task_type != TaskType::InlineFrame));
    }

    #[test]
    fn style_sheet_needs_body_and_probe() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![
                HarEntry::new("http://a.com/a.css", 200, "text/css", 20, &[]).with_text("p { color: blue }"),
                HarEntry::new("http://a.com/b.css", 200, "text/css", 0, &[]).with_text(""),
                HarEntry::new("http://a.com/c.css", 200, "text/css", 20, &[]).with_text("p { margin: 0 }"),
                HarEntry::new("http://a.com/d.css", 404, "text/css", 20, &[]).with_text("p { color: red }"),
            ],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        let sheets: Vec<_> = tasks.iter().filter(|t| t.task_type == TaskType::StyleSheet).collect();
        assert_eq!(sheets.len(), 1);
        assert_eq!(sheets[0].resource_url, "http://a.com/a.css");
        assert_eq!(sheets[0].style_probe.as_ref().unwrap().expected_value, "blue");
    }

    #[test]
    fn script_tasks_for_every_ok_entry_and_order_is_fixed() {
        let doc = HarDocument::new(
            "http://a.com/",
            vec![
                html("http://a.com/", 100),
                HarEntry::new(
                    "http://a.com/x.js",
                    200,
                    "application/javascript",
                    10,
                    &[("X-Content-Type-Options", "nosniff")],
                ),
                HarEntry::new("http://a.com/missing.js", 404, "text/html", 10, &[]),
                png("http://a.com/i.png", 10, true),
                HarEntry::new("data:image/png;base64,AAAA", 200, "image/png", 3, &[]),
            ],
        );
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        let kinds: Vec<_> = tasks.iter().map(|t| t.task_type).collect();
        assert_eq!(
            kinds,
            vec![
                TaskType::Image,
                TaskType::InlineFrame,
                TaskType::Script,
                TaskType::Script,
                TaskType::Script
            ]
        );
        let js = tasks.iter().find(|t| t.resource_url.ends_with("x.js")).unwrap();
        assert!(js.script_safe);
        let ids: BTreeSet<_> = tasks.iter().map(|t| t.measurement_id).collect();
        assert_eq!(ids.len(), tasks.len());
    }

    #[test]
    fn zero_byte_images_are_not_image_tasks() {
        let doc = HarDocument::new("http://a.com/", vec![png("http://a.com/e.png", 0, true)]);
        let tasks = generate_tasks(&doc, &TaskGenLimits::default());
        assert!(tasks.iter().all(|t| t.task_type == TaskType::Script));
    }

    fn arb_entry() -> impl Strategy<Value = HarEntry> {
        (
            0u32..40,
            prop_oneof![Just(200u16), Just(404), Just(302)],
            prop_oneof![
                Just("image/png"),
                Just("image/gif"),
                Just("text/css"),
                Just("text/html"),
                Just("video/mp4"),
                Just("application/javascript")
            ],
            0u64..200_000,
            any::<bool>(),
        )
            .prop_map(|(n, status, mime, size, cache)| {
                let cc = if cache { "max-age=60" } else { "no-cache" };
                HarEntry::new(
                    &format!("http://h{}.org/r{n}", n % 3),
                    status,
                    mime,
                    size,
                    &[("Cache-Control", cc)],
                )
                .with_text("a{color:red}")
            })
    }

    proptest! {
        #[test]
        fn generated_tasks_respect_limits(entries in proptest::collection::vec(arb_entry(), 0..25)) {
            let limits = TaskGenLimits::default();
            let doc = HarDocument::new("http://h0.org/", entries);
            let tasks = generate_tasks(&doc, &limits);
            prop_assert_eq!(&tasks, &generate_tasks(&doc, &limits));
            for t in &tasks {
                prop_assert!(t.is_well_formed());
                match t.task_type {
                    TaskType::Image => prop_assert!(t.max_bytes <= limits.image_max_bytes && t.max_bytes > 0),
                    TaskType::InlineFrame => {
                        prop_assert!(doc.total_bytes() <= limits.page_max_bytes);
                        prop_assert!(!doc.entries().iter().any(|e| e.mime_type.starts_with("video/")));
                        prop_assert!(doc.entries().iter().any(|e| e.url == t.resource_url && e.cacheable));
                    }
                    _ => {}
                }
            }
        }

        #[test]
        fn expansion_never_exceeds_limit(n in 0usize..200, limit in 1usize..80, seed in any::<u64>()) {
            let corpus = UrlCorpus::new((0..n).map(|i| format!("http://foo.com/{i}"))).unwrap();
            let limits = TaskGenLimits { max_urls_per_pattern: limit, ..Default::default() };
            let p = TargetPattern::domain("foo.com").unwrap();
            let e = expand_pattern(&p, &corpus, &limits, seed);
            prop_assert_eq!(e.urls.len(), n.min(limit));
        }
    }
}
