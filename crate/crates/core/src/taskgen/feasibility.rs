use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};

use super::TaskGenLimits;
use crate::domain::canonicalize_resource_key;
use crate::har::{HarDocument, HarEntry};

/// Middle page-size bucket for cacheable-image counts.
pub const MIDSIZE_PAGE_BYTES: u64 = 500 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Distinct renderable images a domain hosts.
    DomainImages,
    /// Total bytes one page load transfers.
    PageBytes,
    /// Distinct cacheable images one page embeds.
    CacheableImages,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub subject: String,
    pub metric: Metric,
    pub bucket: String,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeasibilityReport {
    pub rows: Vec<FeasibilityRow>,
}

impl FeasibilityReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, subject: &str, metric: Metric, bucket: &str) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.subject == subject && r.metric == metric && r.bucket == bucket)
            .map(|r| r.count)
    }

    /// Share of domains with at least one image in `bucket`.
    pub fn domain_fraction(&self, bucket: &str) -> f64 {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.metric == Metric::DomainImages && r.bucket == bucket)
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.count > 0).count() as f64 / rows.len() as f64
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn renderable_image(e: &HarEntry) -> bool {
    e.is_image && e.status == 200 && e.body_size > 0
}

/// Resource sizes and page footprints that bound which tasks are possible:
/// per-domain image counts by size, per-page byte totals, and per-page
/// cacheable-image counts for pages under each size cap.
pub fn feasibility_stats(docs: &[HarDocument], limits: &TaskGenLimits) -> FeasibilityReport {
    let mut rows = Vec::new();

    // Images are deduplicated per domain by canonical key; the smallest
    // recorded size wins when a URL was seen more than once.
    let mut per_domain: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for doc in docs {
        let Some(domain) = doc.domain() else { continue };
        let images = per_domain.entry(domain).or_default();
        for e in doc.entries().iter().filter(|e| renderable_image(e)) {
            let Ok(key) = canonicalize_resource_key(&e.url) else {
                continue;
            };
            images
                .entry(key)
                .and_modify(|s| *s = (*s).min(e.body_size))
                .or_insert(e.body_size);
        }
    }
    for (domain, images) in &per_domain {
        let count = |cap: u64| images.values().filter(|&&s| s <= cap).count() as u64;
        for (bucket, n) in [
            ("le_1kb", count(limits.image_max_bytes)),
            ("le_5kb", count(limits.image_relaxed_max_bytes)),
            ("any", images.len() as u64),
        ] {
            rows.push(FeasibilityRow {
                subject: domain.clone(),
                metric: Metric::DomainImages,
                bucket: bucket.into(),
                count: n,
            });
        }
    }

    for doc in docs {
        rows.push(FeasibilityRow {
            subject: doc.page_url().to_string(),
            metric: Metric::PageBytes,
            bucket: "total".into(),
            count: doc.total_bytes(),
        });
        let cacheable: BTreeSet<String> = doc
            .entries()
            .iter()
            .filter(|e| renderable_image(e) && e.cacheable)
            .filter_map(|e| canonicalize_resource_key(&e.url).ok())
            .collect();
        for (bucket, cap) in [
            ("le_100kb", Some(limits.page_max_bytes)),
            ("le_500kb", Some(MIDSIZE_PAGE_BYTES)),
            ("all", None),
        ] {
            if cap.is_none_or(|c| doc.total_bytes() <= c) {
                rows.push(FeasibilityRow {
                    subject: doc.page_url().to_string(),
                    metric: Metric::CacheableImages,
                    bucket: bucket.into(),
                    count: cacheable.len() as u64,
                });
            }
        }
    }

    FeasibilityReport { rows }
}
