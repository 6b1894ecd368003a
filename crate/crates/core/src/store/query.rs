//! Query parameters and the filter window they describe.
//!
//! The window is the union, over every date in the range, of the hours
//! `hour_from..=hour_to` of that date in UTC.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{DistributionType, UseCase, VehicleClass};

/// Upper bound on buckets per series, to keep minute-resolution queries
/// over long ranges from exhausting memory.
pub const MAX_BUCKETS: usize = 100_000;
pub const MAX_DAYS: i64 = 3_660;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    TimeBucket,
    Sensor,
    Date,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time_bucket" => Ok(GroupBy::TimeBucket),
            "sensor" => Ok(GroupBy::Sensor),
            "date" => Ok(GroupBy::Date),
            other => Err(format!("unknown group_by `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Minute,
    #[default]
    Hour,
    Day,
}

impl Bucket {
    pub fn seconds(self) -> i64 {
        match self {
            Bucket::Minute => 60,
            Bucket::Hour => 3_600,
            Bucket::Day => 86_400,
        }
    }
}

impl FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minute" => Ok(Bucket::Minute),
            "hour" => Ok(Bucket::Hour),
            "day" => Ok(Bucket::Day),
            other => Err(format!("unknown bucket `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct InvalidSpec {
    pub param: String,
    pub message: String,
}

impl InvalidSpec {
    pub fn new(param: impl Into<String>, message: impl Into<String>) -> Self {
        InvalidSpec {
            param: param.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for InvalidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.param, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub use_case: UseCase,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub hour_from: u32,
    pub hour_to: u32,
    /// Empty means every sensor of the use case.
    pub sensors: Vec<String>,
    /// Traffic only.
    pub classes: Vec<VehicleClass>,
    /// Traffic only.
    pub distribution: DistributionType,
    pub group_by: GroupBy,
    pub bucket: Bucket,
}

impl QuerySpec {
    /// Whole days, every sensor, every class, hourly totals.
    pub fn new(use_case: UseCase, date_from: NaiveDate, date_to: NaiveDate) -> Self {
        QuerySpec {
            use_case,
            date_from,
            date_to,
            hour_from: 0,
            hour_to: 23,
            sensors: Vec::new(),
            classes: VehicleClass::ALL.to_vec(),
            distribution: DistributionType::Total,
            group_by: GroupBy::TimeBucket,
            bucket: Bucket::Hour,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidSpec> {
        if self.date_from > self.date_to {
            return Err(InvalidSpec::new("to", "must not be before `from`"));
        }
        let days = (self.date_to - self.date_from).num_days() + 1;
        if days > MAX_DAYS {
            return Err(InvalidSpec::new("to", format!("range exceeds {MAX_DAYS} days")));
        }
        if self.hour_from > 23 {
            return Err(InvalidSpec::new("hour_from", "must be in 0..=23"));
        }
        if self.hour_to > 23 {
            return Err(InvalidSpec::new("hour_to", "must be in 0..=23"));
        }
        if self.hour_from > self.hour_to {
            return Err(InvalidSpec::new("hour_to", "must not be before `hour_from`"));
        }
        if self.use_case == UseCase::Traffic && self.classes.is_empty() {
            return Err(InvalidSpec::new("classes", "at least one class required"));
        }
        if self.group_by == GroupBy::Date && self.sensors.len() != 1 {
            return Err(InvalidSpec::new("sensors", "group_by=date requires exactly one sensor"));
        }
        let per_group = match self.group_by {
            GroupBy::Date => self.buckets_for(self.date_from, self.date_from).len(),
            _ => self.bucket_count_estimate(days),
        };
        if per_group > MAX_BUCKETS {
            return Err(InvalidSpec::new(
                "bucket",
                format!("{per_group} buckets exceed the limit of {MAX_BUCKETS}"),
            ));
        }
        Ok(())
    }

    fn bucket_count_estimate(&self, days: i64) -> usize {
        let hours = i64::from(self.hour_to - self.hour_from + 1);
        let n = match self.bucket {
            Bucket::Minute => days * hours * 60,
            Bucket::Hour => days * hours,
            Bucket::Day => days,
        };
        n as usize
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.date_from.iter_days().take_while(move |d| *d <= self.date_to)
    }

    /// `[start, end)` in unix seconds for one date.
    pub fn day_window(&self, date: NaiveDate) -> (i64, i64) {
        let midnight = day_start(date);
        (
            midnight + i64::from(self.hour_from) * 3_600,
            midnight + i64::from(self.hour_to + 1) * 3_600,
        )
    }

    /// Per-date windows in ascending order.
    pub fn windows(&self) -> Vec<(i64, i64)> {
        self.dates().map(|d| self.day_window(d)).collect()
    }

    /// Start of every bucket that overlaps the window for dates
    /// `from..=to`, ascending.
    pub fn buckets_for(&self, from: NaiveDate, to: NaiveDate) -> Vec<i64> {
        let size = self.bucket.seconds();
        let mut out: Vec<i64> = Vec::new();
        for date in from.iter_days().take_while(|d| *d <= to) {
            let (start, end) = self.day_window(date);
            let mut b = start.div_euclid(size) * size;
            while b < end {
                if out.last() != Some(&b) {
                    out.push(b);
                }
                b += size;
            }
        }
        out
    }

    pub fn buckets(&self) -> Vec<i64> {
        self.buckets_for(self.date_from, self.date_to)
    }
}

pub fn day_start(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp()
}

pub fn to_utc(secs: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(secs, 0).expect("timestamp in range")
}

/// Length of the overlap of `[a, b)` with `[c, d)`.
pub fn overlap(a: i64, b: i64, c: i64, d: i64) -> i64 {
    (b.min(d) - a.max(c)).max(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: DateTime<Utc>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesGroup {
    pub label: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub use_case: UseCase,
    pub group_by: GroupBy,
    pub bucket: Bucket,
    /// `vehicles`, `vehicles_per_minute` or `wh`.
    pub unit: String,
    pub groups: Vec<SeriesGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub sensor: String,
    pub date: NaiveDate,
    pub hour_from: u32,
    pub hour_to: u32,
    pub power_w: f64,
    pub window_seconds: i64,
    pub on_seconds: i64,
    pub off_seconds: i64,
    /// on_seconds / window_seconds.
    pub on_fraction: f64,
    pub energy_wh: f64,
    /// Wh per UTC hour of the date; hours outside the window are 0.
    pub hourly: Vec<f64>,
}
