//! Per-region filtering inference over success counts, and the cache-timing
//! classifier used by inline-frame measurements.

mod binomial;
mod timing;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{
    ComparisonRegion, DetectionConfig, DomainError, FilteringVerdict, Region, RegionStats, VerdictReason,
};

pub use binomial::binomial_cdf;
pub use timing::{classify_iframe_timing, median, TimingClass, TimingClassifierConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("x = {x} outside the support 0..={n}")]
    Domain { n: u64, x: i64 },
    #[error("success probability {0} outside (0, 1)")]
    Probability(f64),
    #[error(transparent)]
    Config(#[from] DomainError),
}

/// One-sided binomial test per region: a region is flagged when its
/// successes are improbably low under the no-filtering null and every other
/// region with enough samples passes the same test.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectionConfig,
}

struct Tally {
    n: u64,
    x: u64,
    p_value: f64,
}

impl Detector {
    pub fn new(cfg: DetectionConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Detector { cfg })
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.cfg
    }

    /// Verdicts for one resource, sorted by region. Unknown-region rows and
    /// rows with `x > n` are ignored; repeated regions are summed. Each
    /// verdict lists the other regions with enough samples, so a looser
    /// "any other region passes" reading can be recomputed from the output.
    pub fn detect(&self, stats: &[RegionStats]) -> Vec<FilteringVerdict> {
        let Some(resource_key) = stats.first().map(|s| s.resource_key.clone()) else {
            return Vec::new();
        };
        let mut merged: BTreeMap<Region, (u64, u64)> = BTreeMap::new();
        for s in stats {
            if s.region.is_unknown() {
                continue;
            }
            if s.x > s.n {
                tracing::warn!(region = %s.region, n = s.n, x = s.x, "discarding stats with x > n");
                continue;
            }
            let slot = merged.entry(s.region).or_default();
            slot.0 += s.n;
            slot.1 += s.x;
        }

        let tallies: BTreeMap<Region, Tally> = merged
            .into_iter()
            .map(|(region, (n, x))| {
                let p_value = if n == 0 {
                    1.0
                } else {
                    binomial_cdf(n, self.cfg.p, x as i64).expect("x <= n and p validated")
                };
                (region, Tally { n, x, p_value })
            })
            .collect();

        let eligible = |t: &Tally| t.n >= self.cfg.min_samples && t.n > 0;
        let eligible_count = tallies.values().filter(|t| eligible(t)).count();
        let fails = |t: &Tally| t.p_value <= self.cfg.alpha;

        tallies
            .iter()
            .map(|(&region, t)| {
                let others = tallies.iter().filter(|(r, o)| **r != region && eligible(o));
                let reason = if !eligible(t) {
                    VerdictReason::InsufficientData
                } else if eligible_count < 2 {
                    VerdictReason::InsufficientComparisonRegions
                } else if !fails(t) {
                    VerdictReason::PassesNull
                } else if others.clone().any(|(_, o)| fails(o)) {
                    VerdictReason::FailsInOtherRegions
                } else {
                    VerdictReason::Filtered
                };
                FilteringVerdict {
                    resource_key: resource_key.clone(),
                    region,
                    p_value: t.p_value,
                    flagged: reason == VerdictReason::Filtered,
                    reason,
                    n: t.n,
                    x: t.x,
                    comparison_regions: others
                        .map(|(&r, o)| ComparisonRegion {
                            region: r,
                            p_value: o.p_value,
                            n: o.n,
                            x: o.x,
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Groups mixed stats by resource key and runs [`Detector::detect`] on each.
    pub fn detect_all(&self, stats: &[RegionStats]) -> Vec<FilteringVerdict> {
        let mut by_key: BTreeMap<&str, Vec<RegionStats>> = BTreeMap::new();
        for s in stats {
            by_key.entry(s.resource_key.as_str()).or_default().push(s.clone());
        }
        by_key.values().flat_map(|group| self.detect(group)).collect()
    }
}
