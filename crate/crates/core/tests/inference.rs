use std::collections::HashMap;

use chrono::{Duration, TimeZone, Utc};
use crossprobe_core::collect::{aggregate, AggregateConfig};
use crossprobe_core::detector::{binomial_cdf, Detector};
use crossprobe_core::schedule::{TaskIndex, TaskRef};
use crossprobe_core::{
    BrowserFamily, ClientContext, DetectionConfig, MeasurementResult, Region, RegionStats, ResultState, TaskType,
};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use proptest::prelude::*;
use uuid::Uuid;

/// Pr[Bin(n, a/(a+b)) <= x] as an exact fraction `(num, den)`.
fn exact_cdf(n: u64, a: u32, b: u32, x: u64) -> (BigUint, BigUint) {
    let den = BigUint::from(a + b).pow(n as u32);
    let mut term = BigUint::from(b).pow(n as u32);
    let mut cum = term.clone();
    for k in 1..=x {
        term = term * (n - k + 1) * a / (BigUint::from(k) * b);
        cum += &term;
    }
    (cum, den)
}

fn to_f64((num, den): (BigUint, BigUint)) -> f64 {
    ((num << 64u32) / den).to_f64().unwrap() / 2f64.powi(64)
}

#[test]
fn reference_values_match_exact_fractions() {
    for (n, x, want) in [(10, 3, 0.010592), (10, 6, 0.350389), (10, 10, 1.0)] {
        let exact = to_f64(exact_cdf(n, 7, 3, x));
        assert!((exact - want).abs() < 5e-7, "oracle disagrees with tabulated value at x={x}");
        assert!((binomial_cdf(n, 0.7, x as i64).unwrap() - exact).abs() < 1e-12);
    }
}

#[test]
fn accurate_at_ten_thousand_trials() {
    let n = 10_000;
    for x in [6_800, 6_900, 6_950, 7_000, 7_050, 7_100] {
        let exact = to_f64(exact_cdf(n, 7, 3, x));
        let got = binomial_cdf(n, 0.7, x as i64).unwrap();
        assert!((got - exact).abs() < 1e-12, "x={x}: {got} vs {exact}");
    }
}

/// Flagging decision computed with exact arithmetic at p = 7/10, alpha = 1/20.
fn fails_null_exactly(n: u64, x: u64) -> bool {
    let (num, den) = exact_cdf(n, 7, 3, x);
    num * 20u32 <= den
}

fn region(i: usize) -> Region {
    ["US", "PK", "CN", "IR", "DE"][i].parse().unwrap()
}

proptest! {
    #[test]
    fn detection_matches_exact_decision(counts in prop::collection::vec((0u64..60, 0.0f64..=1.0), 2..=5)) {
        let stats: Vec<RegionStats> = counts
            .iter()
            .enumerate()
            .map(|(i, &(n, frac))| RegionStats {
                resource_key: "http://a.test/x.png".into(),
                region: region(i),
                n,
                x: (n as f64 * frac).floor() as u64,
            })
            .collect();
        let eligible: Vec<&RegionStats> = stats.iter().filter(|s| s.n >= 5).collect();
        let failing: Vec<bool> = eligible.iter().map(|s| fails_null_exactly(s.n, s.x)).collect();
        let verdicts = Detector::new(DetectionConfig::default()).unwrap().detect(&stats);
        prop_assert_eq!(verdicts.len(), stats.len());
        for v in &verdicts {
            let want = match eligible.iter().position(|s| s.region == v.region) {
                Some(i) if eligible.len() >= 2 => {
                    failing[i] && failing.iter().enumerate().all(|(j, f)| j == i || !f)
                }
                _ => false,
            };
            prop_assert_eq!(v.flagged, want, "region {} n={} x={}", v.region, v.n, v.x);
        }
    }
}

#[derive(Debug, Clone)]
struct Scripted {
    region: usize,
    init: bool,
    terminal: Option<bool>,
    delay_secs: i64,
    frame: bool,
}

fn scripted() -> impl Strategy<Value = Scripted> {
    (0usize..3, prop::bool::weighted(0.9), prop::option::of(any::<bool>()), 0i64..300, prop::bool::weighted(0.2))
        .prop_map(|(region, init, terminal, delay_secs, frame)| Scripted {
            region,
            init,
            terminal,
            delay_secs,
            frame,
        })
}

proptest! {
    #[test]
    fn aggregation_counts_are_consistent(log in prop::collection::vec(scripted(), 0..80)) {
        let t0 = Utc.with_ymd_and_hms(2026, 5, 1, 12, 0, 0).unwrap();
        let now = t0 + Duration::seconds(200);
        let mut index = TaskIndex::new();
        let mut results = Vec::new();
        let mut want: HashMap<(Region, bool), (u64, u64)> = HashMap::new();
        for (i, m) in log.iter().enumerate() {
            let id = Uuid::from_u128(i as u128 + 1);
            let task_type = if m.frame { TaskType::InlineFrame } else { TaskType::Image };
            let key = if m.frame { "http://a.test/page.html" } else { "http://a.test/x.png" };
            index.insert(id, TaskRef { resource_key: key.into(), task_type });
            let context = ClientContext {
                client_id: format!("c{i}"),
                region: region(m.region),
                browser_family: BrowserFamily::Chrome,
                origin_site: None,
            };
            let at = |secs: i64| t0 + Duration::seconds(secs);
            let push = |state, secs, results: &mut Vec<MeasurementResult>| {
                results.push(MeasurementResult {
                    measurement_id: id,
                    state,
                    elapsed_ms: None,
                    received_at: at(secs),
                    context: context.clone(),
                })
            };
            if m.init {
                push(ResultState::Init, 0, &mut results);
            }
            if let Some(ok) = m.terminal {
                let state = if ok { ResultState::Success } else { ResultState::Failure };
                push(state, m.delay_secs.min(199), &mut results);
            }
            if !m.init {
                continue;
            }
            // Hand tabulation of the counting rule.
            let counted = match m.terminal {
                Some(ok) => Some(ok),
                None if m.frame => None,
                None => Some(false),
            };
            if let Some(ok) = counted {
                let e = want.entry((region(m.region), m.frame)).or_default();
                e.0 += 1;
                e.1 += u64::from(ok);
            }
        }
        // Every unanswered ID is past the default timeout at `now`.
        let cfg = AggregateConfig { timeout_secs: 120 };
        let agg = aggregate(&results, &index, &cfg, now);
        prop_assert_eq!(&agg, &aggregate(&results, &index, &cfg, now));
        let mut got = HashMap::new();
        for s in &agg.stats {
            prop_assert!(s.x <= s.n);
            got.insert((s.region, s.resource_key.ends_with(".html")), (s.n, s.x));
        }
        want.retain(|_, v| v.0 > 0);
        prop_assert_eq!(got, want);
    }
}
