use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimingClassifierConfig {
    /// How much faster than an uncached load a cached one must be.
    pub cached_threshold_ms: f64,
}

impl Default for TimingClassifierConfig {
    fn default() -> Self {
        TimingClassifierConfig {
            cached_threshold_ms: 50.0,
        }
    }
}

impl TimingClassifierConfig {
    pub fn is_valid(&self) -> bool {
        self.cached_threshold_ms > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TimingClass {
    /// The image came from cache, so the framed page loaded.
    CachedLikelyLoaded,
    UncachedLikelyFiltered,
}

/// Median of the finite samples, `None` if there are none.
pub fn median(samples: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = samples.iter().copied().filter(|s| s.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Cached iff `observed_ms` beats the median uncached baseline by more than
/// the threshold. With no baseline the threshold is the absolute cutoff.
pub fn classify_iframe_timing(
    baseline_uncached_ms: &[f64],
    observed_ms: f64,
    cfg: &TimingClassifierConfig,
) -> TimingClass {
    let cutoff = match median(baseline_uncached_ms) {
        Some(m) => m - cfg.cached_threshold_ms,
        None => cfg.cached_threshold_ms,
    };
    if observed_ms < cutoff {
        TimingClass::CachedLikelyLoaded
    } else {
        TimingClass::UncachedLikelyFiltered
    }
}
