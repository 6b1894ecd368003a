//! Brute-force reference implementations of the store queries.
//!
//! Traffic results are recomputed by walking every minute of the date
//! range and rescanning all readings; energy by walking every second and
//! counting the seconds the light is on. Slow, but with no shared code
//! paths beyond the query parameter types.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::NaiveDate;

use super::query::{day_start, to_utc, EnergyTotals, GroupBy, QuerySpec, SeriesGroup, SeriesPoint, SeriesResult};
use super::QueryError;
use crate::model::{DistributionType, LightingEvent, LightingEventKind, TrafficReading, UseCase};

fn sensor_list(spec: &QuerySpec, present: BTreeSet<String>) -> Result<Vec<String>, QueryError> {
    if spec.sensors.is_empty() {
        return Ok(present.into_iter().collect());
    }
    for s in &spec.sensors {
        if !present.contains(s) {
            return Err(QueryError::UnknownSensor(s.clone()));
        }
    }
    Ok(spec.sensors.clone())
}

/// (sensors, dates, label) for every group.
fn groups(spec: &QuerySpec, sensors: &[String]) -> Vec<(Vec<String>, Vec<NaiveDate>, String)> {
    let dates: Vec<NaiveDate> = spec.dates().collect();
    match spec.group_by {
        GroupBy::TimeBucket => vec![(sensors.to_vec(), dates, "all".into())],
        GroupBy::Sensor => sensors
            .iter()
            .map(|s| (vec![s.clone()], dates.clone(), s.clone()))
            .collect(),
        GroupBy::Date => dates
            .iter()
            .map(|d| (sensors.to_vec(), vec![*d], d.to_string()))
            .collect(),
    }
}

fn in_window(spec: &QuerySpec, dates: &[NaiveDate], t: i64) -> bool {
    let date = to_utc(t).date_naive();
    let hour = (t.rem_euclid(86_400) / 3_600) as u32;
    dates.contains(&date) && spec.hour_from <= hour && hour <= spec.hour_to
}

fn range_secs(dates: &[NaiveDate]) -> (i64, i64) {
    let first = day_start(*dates.first().expect("non-empty"));
    let last = day_start(*dates.last().expect("non-empty")) + 86_400;
    (first, last)
}

pub fn query_traffic(readings: &[TrafficReading], spec: &QuerySpec) -> Result<SeriesResult, QueryError> {
    spec.validate()?;
    let mut seen = HashSet::new();
    let rows: Vec<&TrafficReading> = readings
        .iter()
        .filter(|r| seen.insert((r.sensor_id.clone(), r.ts)))
        .collect();
    let sensors = sensor_list(spec, rows.iter().map(|r| r.sensor_id.clone()).collect())?;
    let size = spec.bucket.seconds();
    let mut out = Vec::new();
    for (group_sensors, dates, label) in groups(spec, &sensors) {
        let shift = day_start(dates[0]) - day_start(spec.date_from);
        // bucket start -> (sum, minutes in window)
        let mut buckets: BTreeMap<i64, (u64, i64)> = BTreeMap::new();
        let (first, last) = range_secs(&dates);
        let mut m = first;
        while m < last {
            if in_window(spec, &dates, m) {
                let entry = buckets.entry(m - m.rem_euclid(size)).or_default();
                entry.1 += 1;
                for r in &rows {
                    if r.ts.timestamp() == m && group_sensors.contains(&r.sensor_id) {
                        entry.0 += spec.classes.iter().map(|c| u64::from(r.count(*c))).sum::<u64>();
                    }
                }
            }
            m += 60;
        }
        let points = buckets
            .into_iter()
            .map(|(b, (sum, minutes))| SeriesPoint {
                ts: to_utc(b - shift),
                value: match spec.distribution {
                    DistributionType::Total => sum as f64,
                    DistributionType::AveragePerMinute => sum as f64 / minutes as f64,
                },
            })
            .collect();
        out.push(SeriesGroup { label, points });
    }
    Ok(SeriesResult {
        use_case: UseCase::Traffic,
        group_by: spec.group_by,
        bucket: spec.bucket,
        unit: match spec.distribution {
            DistributionType::Total => "vehicles",
            DistributionType::AveragePerMinute => "vehicles_per_minute",
        }
        .into(),
        groups: out,
    })
}

/// Second-by-second on/off state of one sensor over `[first, last)`.
/// Events that repeat the current state are ignored.
fn on_seconds(events: &[LightingEvent], sensor: &str, first: i64, last: i64) -> Vec<bool> {
    let mut seen = HashSet::new();
    let mut ev: Vec<(i64, u8)> = events
        .iter()
        .filter(|e| e.sensor_id == sensor)
        .filter(|e| seen.insert((e.ts, e.event)))
        .filter_map(|e| match e.event {
            LightingEventKind::LightOff => Some((e.ts.timestamp(), 0)),
            LightingEventKind::LightOn => Some((e.ts.timestamp(), 1)),
            LightingEventKind::Motion => None,
        })
        .collect();
    ev.sort_unstable();
    let mut state = vec![false; (last - first) as usize];
    let mut on = false;
    let mut i = 0;
    // Events before the range only matter for the state they leave behind.
    while i < ev.len() && ev[i].0 < first {
        on = ev[i].1 == 1;
        i += 1;
    }
    for (s, slot) in state.iter_mut().enumerate() {
        let t = first + s as i64;
        while i < ev.len() && ev[i].0 == t {
            on = ev[i].1 == 1;
            i += 1;
        }
        *slot = on;
    }
    state
}

pub fn query_energy(events: &[LightingEvent], power_w: f64, spec: &QuerySpec) -> Result<SeriesResult, QueryError> {
    spec.validate()?;
    let sensors = sensor_list(spec, events.iter().map(|e| e.sensor_id.clone()).collect())?;
    let size = spec.bucket.seconds();
    let all_dates: Vec<NaiveDate> = spec.dates().collect();
    let (first, last) = range_secs(&all_dates);
    let states: BTreeMap<&str, Vec<bool>> = sensors
        .iter()
        .map(|s| (s.as_str(), on_seconds(events, s, first, last)))
        .collect();
    let mut out = Vec::new();
    for (group_sensors, dates, label) in groups(spec, &sensors) {
        let shift = day_start(dates[0]) - day_start(spec.date_from);
        let mut buckets: BTreeMap<i64, u64> = BTreeMap::new();
        let (gfirst, glast) = range_secs(&dates);
        for t in gfirst..glast {
            if !in_window(spec, &dates, t) {
                continue;
            }
            let entry = buckets.entry(t - t.rem_euclid(size)).or_default();
            for s in &group_sensors {
                if states[s.as_str()][(t - first) as usize] {
                    *entry += 1;
                }
            }
        }
        let points = buckets
            .into_iter()
            .map(|(b, secs)| SeriesPoint {
                ts: to_utc(b - shift),
                value: power_w * secs as f64 / 3600.0,
            })
            .collect();
        out.push(SeriesGroup { label, points });
    }
    Ok(SeriesResult {
        use_case: UseCase::Lighting,
        group_by: spec.group_by,
        bucket: spec.bucket,
        unit: "wh".into(),
        groups: out,
    })
}

pub fn query_energy_total(
    events: &[LightingEvent],
    power_w: f64,
    sensor: &str,
    date: NaiveDate,
    hour_from: u32,
    hour_to: u32,
) -> Result<EnergyTotals, QueryError> {
    if !events.iter().any(|e| e.sensor_id == sensor) {
        return Err(QueryError::UnknownSensor(sensor.to_owned()));
    }
    let first = day_start(date);
    let states = on_seconds(events, sensor, first, first + 86_400);
    let mut hourly_secs = [0i64; 24];
    let mut window_seconds = 0;
    for (s, on) in states.iter().enumerate() {
        let hour = (s / 3600) as u32;
        if hour < hour_from || hour > hour_to {
            continue;
        }
        window_seconds += 1;
        if *on {
            hourly_secs[hour as usize] += 1;
        }
    }
    let on_seconds: i64 = hourly_secs.iter().sum();
    Ok(EnergyTotals {
        sensor: sensor.to_owned(),
        date,
        hour_from,
        hour_to,
        power_w,
        window_seconds,
        on_seconds,
        off_seconds: window_seconds - on_seconds,
        on_fraction: on_seconds as f64 / window_seconds as f64,
        energy_wh: power_w * on_seconds as f64 / 3600.0,
        hourly: hourly_secs.iter().map(|s| power_w * *s as f64 / 3600.0).collect(),
    })
}
