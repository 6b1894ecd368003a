//! PIR motion generation and the light controller.
//!
//! Motions for each (location, minute) come from an independent substream:
//! a Poisson count at the hour's rate, placed at distinct uniform seconds.
//! The controller turns the light on at the first motion while off and
//! off `hold_seconds` after the latest motion. A motion landing exactly on
//! the deadline keeps the light on.

use std::collections::VecDeque;

use chrono::{DateTime, Duration, DurationRound, Timelike, Utc};

use super::config::LightingSimConfig;
use super::rng::poisson_sample;
use super::traffic::substream;
use crate::model::{LightingEvent, LightingEventKind};

/// Motion timestamps inside the minute starting at `minute_ts`, ascending
/// and distinct.
pub fn motions_in_minute(config: &LightingSimConfig, location: &str, minute_ts: DateTime<Utc>) -> Vec<DateTime<Utc>> {
    let mut rng = substream(config.seed, location, minute_ts);
    let rate = config.motion_rate_profile[minute_ts.hour() as usize] / 60.0;
    let n = poisson_sample(&mut rng, rate).expect("validated rate");
    let mut secs: Vec<u64> = (0..n).map(|_| rng.below(60)).collect();
    secs.sort_unstable();
    secs.dedup();
    secs.into_iter()
        .map(|s| minute_ts + Duration::seconds(s as i64))
        .collect()
}

/// Controller state for one location. Starts with the light off at
/// `start` (rounded down to a minute).
#[derive(Debug, Clone)]
pub struct LightState {
    location: String,
    generated_until: DateTime<Utc>,
    pending: VecDeque<DateTime<Utc>>,
    deadline: Option<DateTime<Utc>>,
    emitted_until: DateTime<Utc>,
}

impl LightState {
    pub fn new(location: impl Into<String>, start: DateTime<Utc>) -> Self {
        let start = start.duration_trunc(Duration::minutes(1)).expect("in range");
        LightState {
            location: location.into(),
            generated_until: start,
            pending: VecDeque::new(),
            deadline: None,
            emitted_until: start,
        }
    }

    pub fn location(&self) -> &str {
        &self.location
    }

    pub fn is_on(&self) -> bool {
        self.deadline.is_some()
    }
}

/// Emits every event with a timestamp before `now`, in time order. The
/// output does not depend on how the calls are spaced.
pub fn lighting_step(config: &LightingSimConfig, state: &mut LightState, now: DateTime<Utc>) -> Vec<LightingEvent> {
    if now <= state.emitted_until {
        return Vec::new();
    }
    while state.generated_until <= now {
        let minute = state.generated_until;
        state
            .pending
            .extend(motions_in_minute(config, &state.location, minute));
        state.generated_until = minute + Duration::minutes(1);
    }
    let hold = Duration::seconds(i64::from(config.hold_seconds));
    let mut out = Vec::new();
    loop {
        let next_motion = state.pending.front().copied().filter(|t| *t < now);
        match (state.deadline, next_motion) {
            (Some(d), m) if d < now && m.is_none_or(|t| t > d) => {
                out.push(LightingEvent::new(&state.location, d, LightingEventKind::LightOff));
                state.deadline = None;
            }
            (_, Some(t)) => {
                state.pending.pop_front();
                out.push(LightingEvent::new(&state.location, t, LightingEventKind::Motion));
                if state.deadline.is_none() {
                    out.push(LightingEvent::new(&state.location, t, LightingEventKind::LightOn));
                }
                state.deadline = Some(t + hold);
            }
            _ => break,
        }
    }
    state.emitted_until = now;
    out
}

/// All events for one location over `[start, end)`, starting with the
/// light off.
pub fn lighting_events(config: &LightingSimConfig, location: &str, start: DateTime<Utc>, end: DateTime<Utc>) -> Vec<LightingEvent> {
    let mut state = LightState::new(location, start);
    lighting_step(config, &mut state, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::config::SensorSpec;
    use proptest::prelude::*;

    fn config() -> LightingSimConfig {
        LightingSimConfig::with_defaults(5, vec![SensorSpec::new("R1", "")])
    }

    fn ts(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    /// Replays the controller over explicit motion times.
    fn control(motions: &[DateTime<Utc>], hold: i64, end: DateTime<Utc>) -> Vec<(DateTime<Utc>, LightingEventKind)> {
        let cfg = LightingSimConfig {
            motion_rate_profile: [0.0; 24],
            hold_seconds: hold as u32,
            ..config()
        };
        let mut state = LightState::new("R1", motions.first().copied().unwrap_or(end));
        state.pending.extend(motions.iter().copied());
        lighting_step(&cfg, &mut state, end)
            .into_iter()
            .map(|e| (e.ts, e.event))
            .collect()
    }

    /// Union of [t, t + hold] over all motions, as closed intervals.
    fn union_oracle(motions: &[DateTime<Utc>], hold: i64) -> Vec<(DateTime<Utc>, DateTime<Utc>)> {
        let mut out: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
        for &t in motions {
            let end = t + Duration::seconds(hold);
            match out.last_mut() {
                Some(last) if t <= last.1 => last.1 = last.1.max(end),
                _ => out.push((t, end)),
            }
        }
        out
    }

    fn pairs(events: &[(DateTime<Utc>, LightingEventKind)]) -> Vec<(DateTime<Utc>, DateTime<Utc>)> {
        let mut out = Vec::new();
        let mut on = None;
        for (t, k) in events {
            match k {
                LightingEventKind::LightOn => on = Some(*t),
                LightingEventKind::LightOff => out.push((on.take().unwrap(), *t)),
                LightingEventKind::Motion => {}
            }
        }
        out
    }

    #[test]
    fn single_motion_holds_three_minutes() {
        let t = ts("2017-03-01T10:00:00Z");
        let ev = control(&[t], 180, t + Duration::hours(1));
        assert_eq!(
            ev,
            vec![
                (t, LightingEventKind::Motion),
                (t, LightingEventKind::LightOn),
                (t + Duration::seconds(180), LightingEventKind::LightOff),
            ]
        );
    }

    #[test]
    fn retrigger_extends() {
        let t = ts("2017-03-01T10:00:00Z");
        let ev = control(&[t, t + Duration::seconds(100)], 180, t + Duration::hours(1));
        assert_eq!(pairs(&ev), vec![(t, t + Duration::seconds(280))]);
    }

    #[test]
    fn motion_on_deadline_keeps_light_on() {
        let t = ts("2017-03-01T10:00:00Z");
        let ev = control(&[t, t + Duration::seconds(180)], 180, t + Duration::hours(1));
        assert_eq!(pairs(&ev), vec![(t, t + Duration::seconds(360))]);
    }

    #[test]
    fn no_motion_no_events() {
        let t = ts("2017-03-01T10:00:00Z");
        assert!(control(&[], 180, t).is_empty());
        let mut cfg = config();
        cfg.motion_rate_profile = [0.0; 24];
        assert!(lighting_events(&cfg, "R1", t, t + Duration::days(1)).is_empty());
    }

    #[test]
    fn generated_stream_alternates_and_is_step_independent() {
        let cfg = config();
        let start = ts("2017-03-01T00:00:00Z");
        let end = start + Duration::days(2);
        let whole = lighting_events(&cfg, "R1", start, end);
        assert!(whole.iter().any(|e| e.event == LightingEventKind::LightOn));
        let mut state = LightState::new("R1", start);
        let mut stepped = Vec::new();
        let mut now = start;
        let mut step = 1;
        while now < end {
            now = (now + Duration::seconds(step)).min(end);
            stepped.extend(lighting_step(&cfg, &mut state, now));
            step = step % 997 + 13;
        }
        assert_eq!(whole, stepped);
        let mut on = false;
        for e in &whole {
            match e.event {
                LightingEventKind::LightOn => {
                    assert!(!on);
                    on = true;
                }
                LightingEventKind::LightOff => {
                    assert!(on);
                    on = false;
                }
                LightingEventKind::Motion => {}
            }
        }
        assert!(whole.windows(2).all(|w| w[0].ts <= w[1].ts));
    }

    proptest! {
        #[test]
        fn controller_matches_interval_union(
            mut offsets in proptest::collection::vec(0i64..20_000, 0..40),
            hold in 1i64..600,
        ) {
            offsets.sort_unstable();
            offsets.dedup();
            let base = ts("2017-03-01T00:00:00Z");
            let motions: Vec<_> = offsets.iter().map(|s| base + Duration::seconds(*s)).collect();
            let end = base + Duration::seconds(30_000);
            let ev = control(&motions, hold, end);
            prop_assert_eq!(pairs(&ev), union_oracle(&motions, hold));
        }

        #[test]
        fn generated_motions_match_controller(seed: u64, hours in 1i64..6) {
            let mut cfg = config();
            cfg.seed = seed;
            cfg.motion_rate_profile = [30.0; 24];
            let start = ts("2017-03-01T00:00:00Z");
            let end = start + Duration::hours(hours);
            let events = lighting_events(&cfg, "R1", start, end);
            let motions: Vec<_> = events
                .iter()
                .filter(|e| e.event == LightingEventKind::Motion)
                .map(|e| e.ts)
                .collect();
            let expected: Vec<_> = (0..hours * 60)
                .flat_map(|m| motions_in_minute(&cfg, "R1", start + Duration::minutes(m)))
                .collect();
            prop_assert_eq!(&motions, &expected);
            let closed: Vec<_> = union_oracle(&motions, i64::from(cfg.hold_seconds))
                .into_iter()
                .filter(|(_, off)| *off < end)
                .collect();
            let tuples: Vec<_> = events.iter().map(|e| (e.ts, e.event)).collect();
            prop_assert_eq!(pairs(&tuples), closed);
        }
    }
}
