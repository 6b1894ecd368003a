//! In-memory time-series view over the event log.
//!
//! Rows are keyed on their logical identity, so replaying or duplicating
//! log records never changes the result. When two records carry the same
//! key the one with the smaller (partition, offset) wins, which makes
//! ingest order irrelevant.

pub mod consumer;
pub mod intervals;
pub mod oracle;
pub mod query;
pub mod snapshot;

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use parking_lot::RwLock;

use crate::eventlog::LogRecord;
use crate::model::{
    decode_lighting, decode_traffic, DistributionType, LightingEvent, LightingEventKind, TrafficReading,
    UseCase,
};
use intervals::{clip, pair_events, rank, OnInterval};
pub use query::{
    Bucket, EnergyTotals, GroupBy, InvalidSpec, QuerySpec, SeriesGroup, SeriesPoint, SeriesResult,
};
use query::{day_start, overlap, to_utc};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficRow {
    pub reading: TrafficReading,
    pub partition: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LightingRow {
    pub event: LightingEvent,
    pub partition: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Inserted,
    Duplicate,
    DeadLetter,
    /// Records from streams the store does not materialize (e.g. `.dlq`).
    Ignored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestCounts {
    pub inserted: u64,
    pub duplicate: u64,
    pub dead_letter: u64,
    pub ignored: u64,
}

impl IngestCounts {
    fn add(&mut self, o: IngestOutcome) {
        match o {
            IngestOutcome::Inserted => self.inserted += 1,
            IngestOutcome::Duplicate => self.duplicate += 1,
            IngestOutcome::DeadLetter => self.dead_letter += 1,
            IngestOutcome::Ignored => self.ignored += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.inserted + self.duplicate + self.dead_letter + self.ignored
    }

    pub fn merge(&mut self, other: IngestCounts) {
        self.inserted += other.inserted;
        self.duplicate += other.duplicate;
        self.dead_letter += other.dead_letter;
        self.ignored += other.ignored;
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("invalid spec: {0}")]
    InvalidSpec(#[from] InvalidSpec),
    #[error("unknown sensor {0:?}")]
    UnknownSensor(String),
}

pub fn stream_use_case(stream: &str) -> Option<UseCase> {
    stream.parse().ok()
}

/// Streams the store consumes.
pub const STREAMS: [&str; 2] = ["traffic", "lighting"];

#[derive(Debug, Default, Clone)]
pub(crate) struct Data {
    pub(crate) traffic: BTreeMap<(String, i64), TrafficRow>,
    pub(crate) lighting: BTreeMap<(String, i64, LightingEventKind), LightingRow>,
    /// Next unconsumed offset per (stream, partition).
    pub(crate) offsets: BTreeMap<(String, u32), u64>,
    pub(crate) dead_letters: u64,
}

impl Data {
    fn ingest(&mut self, rec: &LogRecord) -> IngestOutcome {
        let next = self
            .offsets
            .entry((rec.stream.clone(), rec.partition))
            .or_insert(0);
        *next = (*next).max(rec.offset + 1);
        let Some(use_case) = stream_use_case(&rec.stream) else {
            return IngestOutcome::Ignored;
        };
        let source = (rec.partition, rec.offset);
        match use_case {
            UseCase::Traffic => match decode_traffic(&rec.value) {
                Ok(reading) => self.put_traffic(TrafficRow {
                    reading,
                    partition: source.0,
                    offset: source.1,
                }),
                Err(_) => {
                    self.dead_letters += 1;
                    IngestOutcome::DeadLetter
                }
            },
            UseCase::Lighting => match decode_lighting(&rec.value) {
                Ok(event) => self.put_lighting(LightingRow {
                    event,
                    partition: source.0,
                    offset: source.1,
                }),
                Err(_) => {
                    self.dead_letters += 1;
                    IngestOutcome::DeadLetter
                }
            },
        }
    }

    pub(crate) fn put_traffic(&mut self, row: TrafficRow) -> IngestOutcome {
        let key = (row.reading.sensor_id.clone(), row.reading.ts.timestamp());
        match self.traffic.get_mut(&key) {
            Some(existing) => {
                if (row.partition, row.offset) < (existing.partition, existing.offset) {
                    *existing = row;
                }
                IngestOutcome::Duplicate
            }
            None => {
                self.traffic.insert(key, row);
                IngestOutcome::Inserted
            }
        }
    }

    pub(crate) fn put_lighting(&mut self, row: LightingRow) -> IngestOutcome {
        let e = &row.event;
        let key = (e.sensor_id.clone(), e.ts.timestamp(), e.event);
        match self.lighting.get_mut(&key) {
            Some(existing) => {
                if (row.partition, row.offset) < (existing.partition, existing.offset) {
                    *existing = row;
                }
                IngestOutcome::Duplicate
            }
            None => {
                self.lighting.insert(key, row);
                IngestOutcome::Inserted
            }
        }
    }

    fn sensors(&self, use_case: UseCase) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |s: &String| {
            if out.last() != Some(s) {
                out.push(s.clone());
            }
        };
        match use_case {
            UseCase::Traffic => self.traffic.keys().for_each(|(s, _)| push(s)),
            UseCase::Lighting => self.lighting.keys().for_each(|(s, _, _)| push(s)),
        }
        out
    }

    fn has_sensor(&self, use_case: UseCase, sensor: &str) -> bool {
        let lo = (sensor.to_owned(), i64::MIN);
        match use_case {
            UseCase::Traffic => self
                .traffic
                .range(lo..)
                .next()
                .is_some_and(|((s, _), _)| s == sensor),
            UseCase::Lighting => self
                .lighting
                .range((sensor.to_owned(), i64::MIN, LightingEventKind::Motion)..)
                .next()
                .is_some_and(|((s, _, _), _)| s == sensor),
        }
    }

    /// Sorted `(ts, kind)` for one sensor, in pairing order.
    fn lighting_events(&self, sensor: &str) -> Vec<(i64, LightingEventKind)> {
        let lo = (sensor.to_owned(), i64::MIN, LightingEventKind::Motion);
        let hi = (sensor.to_owned(), i64::MAX, LightingEventKind::LightOff);
        let mut ev: Vec<(i64, LightingEventKind)> = self
            .lighting
            .range(lo..=hi)
            .map(|((_, ts, k), _)| (*ts, *k))
            .filter(|(_, k)| *k != LightingEventKind::Motion)
            .collect();
        ev.sort_by_key(|(ts, k)| (*ts, rank(*k)));
        ev
    }
}

/// The materialized view. Ingest takes the write lock once per batch, so
/// readers always see whole batches.
#[derive(Debug)]
pub struct Store {
    data: RwLock<Data>,
    power_w: f64,
}

impl Store {
    pub fn new(power_w: f64) -> Self {
        Store {
            data: RwLock::new(Data::default()),
            power_w,
        }
    }

    pub(crate) fn from_data(data: Data, power_w: f64) -> Self {
        Store {
            data: RwLock::new(data),
            power_w,
        }
    }

    pub(crate) fn read_data(&self) -> parking_lot::RwLockReadGuard<'_, Data> {
        self.data.read()
    }

    pub fn power_w(&self) -> f64 {
        self.power_w
    }

    pub fn ingest(&self, rec: &LogRecord) -> IngestOutcome {
        self.data.write().ingest(rec)
    }

    pub fn ingest_batch(&self, recs: &[LogRecord]) -> IngestCounts {
        let mut counts = IngestCounts::default();
        let mut data = self.data.write();
        for r in recs {
            counts.add(data.ingest(r));
        }
        counts
    }

    pub fn clear(&self) {
        *self.data.write() = Data::default();
    }

    pub fn traffic_row_count(&self) -> usize {
        self.data.read().traffic.len()
    }

    pub fn lighting_row_count(&self) -> usize {
        self.data.read().lighting.len()
    }

    pub fn dead_letters(&self) -> u64 {
        self.data.read().dead_letters
    }

    /// Next offset to consume for `(stream, partition)`.
    pub fn offset(&self, stream: &str, partition: u32) -> u64 {
        self.data
            .read()
            .offsets
            .get(&(stream.to_owned(), partition))
            .copied()
            .unwrap_or(0)
    }

    pub fn offsets(&self) -> BTreeMap<(String, u32), u64> {
        self.data.read().offsets.clone()
    }

    pub fn sensors(&self, use_case: UseCase) -> Vec<String> {
        self.data.read().sensors(use_case)
    }

    /// First and last UTC date with data.
    pub fn date_bounds(&self, use_case: UseCase) -> Option<(NaiveDate, NaiveDate)> {
        let data = self.data.read();
        let ts: Vec<i64> = match use_case {
            UseCase::Traffic => data.traffic.keys().map(|(_, t)| *t).collect(),
            UseCase::Lighting => data.lighting.keys().map(|(_, t, _)| *t).collect(),
        };
        let min = *ts.iter().min()?;
        let max = *ts.iter().max()?;
        Some((to_utc(min).date_naive(), to_utc(max).date_naive()))
    }

    pub fn traffic_rows(&self) -> Vec<TrafficRow> {
        self.data.read().traffic.values().cloned().collect()
    }

    pub fn lighting_rows(&self) -> Vec<LightingRow> {
        self.data.read().lighting.values().cloned().collect()
    }

    /// Events across all sensors that break on/off alternation.
    pub fn alternation_violations(&self) -> u64 {
        let data = self.data.read();
        data.sensors(UseCase::Lighting)
            .iter()
            .map(|s| pair_events(data.lighting_events(s)).violations)
            .sum()
    }

    pub fn on_intervals(&self, sensor: &str, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<Vec<OnInterval>, QueryError> {
        let data = self.data.read();
        if !data.has_sensor(UseCase::Lighting, sensor) {
            return Err(QueryError::UnknownSensor(sensor.to_owned()));
        }
        let pairing = pair_events(data.lighting_events(sensor));
        Ok(clip(&pairing.intervals, from.timestamp(), to.timestamp())
            .into_iter()
            .map(|(s, e)| OnInterval {
                sensor_id: sensor.to_owned(),
                start: to_utc(s),
                end: to_utc(e),
            })
            .collect())
    }

    fn resolve_sensors(&self, data: &Data, spec: &QuerySpec) -> Result<Vec<String>, QueryError> {
        if spec.sensors.is_empty() {
            return Ok(data.sensors(spec.use_case));
        }
        for s in &spec.sensors {
            if !data.has_sensor(spec.use_case, s) {
                return Err(QueryError::UnknownSensor(s.clone()));
            }
        }
        Ok(spec.sensors.clone())
    }

    pub fn query_traffic(&self, spec: &QuerySpec) -> Result<SeriesResult, QueryError> {
        if spec.use_case != UseCase::Traffic {
            return Err(InvalidSpec::new("use_case", "expected traffic").into());
        }
        spec.validate()?;
        let data = self.data.read();
        let sensors = self.resolve_sensors(&data, spec)?;
        let sum_window = |sensors: &[String], from: NaiveDate, to: NaiveDate| -> Vec<SeriesPoint> {
            let buckets = spec.buckets_for(from, to);
            let size = spec.bucket.seconds();
            let mut sums = vec![0u64; buckets.len()];
            for date in from.iter_days().take_while(|d| *d <= to) {
                let (ws, we) = spec.day_window(date);
                for s in sensors {
                    for ((_, ts), row) in data.traffic.range((s.clone(), ws)..(s.clone(), we)) {
                        let b = ts.div_euclid(size) * size;
                        let i = buckets.binary_search(&b).expect("bucket covers window");
                        sums[i] += row.reading.sum(&spec.classes);
                    }
                }
            }
            buckets
                .iter()
                .zip(sums)
                .map(|(&b, sum)| {
                    let value = match spec.distribution {
                        DistributionType::Total => sum as f64,
                        DistributionType::AveragePerMinute => {
                            let minutes = window_overlap(spec, from, to, b, b + size) / 60;
                            sum as f64 / minutes as f64
                        }
                    };
                    SeriesPoint { ts: to_utc(b), value }
                })
                .collect()
        };
        let groups = group(spec, &sensors, sum_window);
        let unit = match spec.distribution {
            DistributionType::Total => "vehicles",
            DistributionType::AveragePerMinute => "vehicles_per_minute",
        };
        Ok(SeriesResult {
            use_case: UseCase::Traffic,
            group_by: spec.group_by,
            bucket: spec.bucket,
            unit: unit.into(),
            groups,
        })
    }

    pub fn query_energy(&self, spec: &QuerySpec) -> Result<SeriesResult, QueryError> {
        if spec.use_case != UseCase::Lighting {
            return Err(InvalidSpec::new("use_case", "expected lighting").into());
        }
        spec.validate()?;
        let data = self.data.read();
        let sensors = self.resolve_sensors(&data, spec)?;
        let windows = spec.windows();
        let (first, last) = (windows[0].0, windows[windows.len() - 1].1);
        let intervals: BTreeMap<&str, Vec<(i64, i64)>> = sensors
            .iter()
            .map(|s| {
                let p = pair_events(data.lighting_events(s));
                (s.as_str(), clip(&p.intervals, first, last))
            })
            .collect();
        let power = self.power_w;
        let energy = |sensors: &[String], from: NaiveDate, to: NaiveDate| -> Vec<SeriesPoint> {
            let buckets = spec.buckets_for(from, to);
            let size = spec.bucket.seconds();
            let mut secs = vec![0i64; buckets.len()];
            for date in from.iter_days().take_while(|d| *d <= to) {
                let (ws, we) = spec.day_window(date);
                for s in sensors {
                    for &(a, b) in &intervals[s.as_str()] {
                        let (a, b) = (a.max(ws), b.min(we));
                        if a >= b {
                            continue;
                        }
                        let mut bucket = a.div_euclid(size) * size;
                        while bucket < b {
                            let i = buckets.binary_search(&bucket).expect("bucket covers window");
                            secs[i] += overlap(a, b, bucket, bucket + size);
                            bucket += size;
                        }
                    }
                }
            }
            buckets
                .iter()
                .zip(secs)
                .map(|(&b, s)| SeriesPoint {
                    ts: to_utc(b),
                    value: power * s as f64 / 3600.0,
                })
                .collect()
        };
        let groups = group(spec, &sensors, energy);
        Ok(SeriesResult {
            use_case: UseCase::Lighting,
            group_by: spec.group_by,
            bucket: spec.bucket,
            unit: "wh".into(),
            groups,
        })
    }

    pub fn query_energy_total(&self, sensor: &str, date: NaiveDate, hour_from: u32, hour_to: u32) -> Result<EnergyTotals, QueryError> {
        let mut spec = QuerySpec::new(UseCase::Lighting, date, date);
        spec.hour_from = hour_from;
        spec.hour_to = hour_to;
        spec.sensors = vec![sensor.to_owned()];
        spec.validate()?;
        let data = self.data.read();
        if !data.has_sensor(UseCase::Lighting, sensor) {
            return Err(QueryError::UnknownSensor(sensor.to_owned()));
        }
        let (ws, we) = spec.day_window(date);
        let pairing = pair_events(data.lighting_events(sensor));
        let on = clip(&pairing.intervals, ws, we);
        let midnight = day_start(date);
        let mut hourly_secs = [0i64; 24];
        for (h, slot) in hourly_secs.iter_mut().enumerate() {
            let hs = midnight + h as i64 * 3600;
            *slot = on.iter().map(|&(a, b)| overlap(a, b, hs, hs + 3600)).sum();
        }
        let on_seconds: i64 = hourly_secs.iter().sum();
        let window_seconds = we - ws;
        let power = self.power_w;
        Ok(EnergyTotals {
            sensor: sensor.to_owned(),
            date,
            hour_from,
            hour_to,
            power_w: power,
            window_seconds,
            on_seconds,
            off_seconds: window_seconds - on_seconds,
            on_fraction: on_seconds as f64 / window_seconds as f64,
            energy_wh: power * on_seconds as f64 / 3600.0,
            hourly: hourly_secs.iter().map(|s| power * *s as f64 / 3600.0).collect(),
        })
    }
}

/// Seconds of `[a, b)` inside the window for dates `from..=to`.
fn window_overlap(spec: &QuerySpec, from: NaiveDate, to: NaiveDate, a: i64, b: i64) -> i64 {
    from.iter_days()
        .take_while(|d| *d <= to)
        .map(|d| {
            let (ws, we) = spec.day_window(d);
            overlap(a, b, ws, we)
        })
        .sum()
}

/// Applies the grouping rule. `series(sensors, from, to)` computes one
/// series over the given sensors and dates.
fn group(
    spec: &QuerySpec,
    sensors: &[String],
    series: impl Fn(&[String], NaiveDate, NaiveDate) -> Vec<SeriesPoint>,
) -> Vec<SeriesGroup> {
    match spec.group_by {
        GroupBy::TimeBucket => vec![SeriesGroup {
            label: "all".into(),
            points: series(sensors, spec.date_from, spec.date_to),
        }],
        GroupBy::Sensor => sensors
            .iter()
            .map(|s| SeriesGroup {
                label: s.clone(),
                points: series(std::slice::from_ref(s), spec.date_from, spec.date_to),
            })
            .collect(),
        GroupBy::Date => spec
            .dates()
            .map(|d| {
                let shift = day_start(d) - day_start(spec.date_from);
                let points = series(sensors, d, d)
                    .into_iter()
                    .map(|p| SeriesPoint {
                        ts: to_utc(p.ts.timestamp() - shift),
                        value: p.value,
                    })
                    .collect();
                SeriesGroup {
                    label: d.to_string(),
                    points,
                }
            })
            .collect(),
    }
}
