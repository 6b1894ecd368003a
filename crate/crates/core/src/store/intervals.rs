//! Pairing light_on / light_off events into on-intervals.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::LightingEventKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnInterval {
    pub sensor_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

/// Result of pairing one sensor's events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing {
    /// `(start, end)` in unix seconds; `end` is `None` for a light that is
    /// still on after the last event.
    pub intervals: Vec<(i64, Option<i64>)>,
    /// Events skipped because they did not alternate.
    pub violations: u64,
}

/// Sort rank at equal timestamps: an off closes the previous interval
/// before an on opens the next.
pub fn rank(kind: LightingEventKind) -> u8 {
    match kind {
        LightingEventKind::LightOff => 0,
        LightingEventKind::LightOn => 1,
        LightingEventKind::Motion => 2,
    }
}

/// Pairs events given in `(ts, rank)` order. Motions are ignored.
pub fn pair_events(events: impl IntoIterator<Item = (i64, LightingEventKind)>) -> Pairing {
    let mut out = Pairing::default();
    let mut open: Option<i64> = None;
    for (ts, kind) in events {
        match (kind, open) {
            (LightingEventKind::LightOn, None) => open = Some(ts),
            (LightingEventKind::LightOff, Some(start)) => {
                out.intervals.push((start, Some(ts)));
                open = None;
            }
            (LightingEventKind::LightOn, Some(_)) | (LightingEventKind::LightOff, None) => {
                out.violations += 1;
            }
            (LightingEventKind::Motion, _) => {}
        }
    }
    if let Some(start) = open {
        out.intervals.push((start, None));
    }
    out
}

/// Clips intervals to `[from, to)`; an open interval runs to `to`.
/// Zero-length results are dropped.
pub fn clip(intervals: &[(i64, Option<i64>)], from: i64, to: i64) -> Vec<(i64, i64)> {
    intervals
        .iter()
        .filter_map(|&(s, e)| {
            let s = s.max(from);
            let e = e.unwrap_or(to).min(to);
            (e > s).then_some((s, e))
        })
        .collect()
}
