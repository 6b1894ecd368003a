//! Domain types shared by every layer of the testbed, and the canonical
//! JSON payload codec used both on the MQTT wire and inside the event log.
//!
//! Encoding is deterministic byte-for-byte: keys are written in a fixed
//! order with no whitespace, so replaying the log reproduces identical
//! bytes.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// The two experiment scenarios the testbed runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UseCase {
    Traffic,
    Lighting,
}

impl UseCase {
    pub fn as_str(self) -> &'static str {
        match self {
            UseCase::Traffic => "traffic",
            UseCase::Lighting => "lighting",
        }
    }
}

impl fmt::Display for UseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UseCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traffic" => Ok(UseCase::Traffic),
            "lighting" => Ok(UseCase::Lighting),
            other => Err(format!("unknown use case `{other}`")),
        }
    }
}

/// One of the ten per-minute count columns of a traffic reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Twmv,
    Carv,
    Busv,
    Lgv,
    Hgv,
    Hgvr2,
    Hgvr3,
    Hgvr4,
    Hgva3,
    Hgva5,
}

impl VehicleClass {
    /// Payload key order.
    pub const ALL: [VehicleClass; 10] = [
        VehicleClass::Twmv,
        VehicleClass::Carv,
        VehicleClass::Busv,
        VehicleClass::Lgv,
        VehicleClass::Hgv,
        VehicleClass::Hgvr2,
        VehicleClass::Hgvr3,
        VehicleClass::Hgvr4,
        VehicleClass::Hgva3,
        VehicleClass::Hgva5,
    ];

    pub const TOP_LEVEL: [VehicleClass; 5] = [
        VehicleClass::Twmv,
        VehicleClass::Carv,
        VehicleClass::Busv,
        VehicleClass::Lgv,
        VehicleClass::Hgv,
    ];

    /// Heavy goods vehicle subcategories; `hgv` is always their sum.
    pub const HGV_PARTS: [VehicleClass; 5] = [
        VehicleClass::Hgvr2,
        VehicleClass::Hgvr3,
        VehicleClass::Hgvr4,
        VehicleClass::Hgva3,
        VehicleClass::Hgva5,
    ];

    pub fn key(self) -> &'static str {
        match self {
            VehicleClass::Twmv => "twmv",
            VehicleClass::Carv => "carv",
            VehicleClass::Busv => "busv",
            VehicleClass::Lgv => "lgv",
            VehicleClass::Hgv => "hgv",
            VehicleClass::Hgvr2 => "hgvr2",
            VehicleClass::Hgvr3 => "hgvr3",
            VehicleClass::Hgvr4 => "hgvr4",
            VehicleClass::Hgva3 => "hgva3",
            VehicleClass::Hgva5 => "hgva5",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for VehicleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VehicleClass::ALL
            .into_iter()
            .find(|c| c.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown vehicle class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistributionType {
    #[default]
    Total,
    AveragePerMinute,
}

impl FromStr for DistributionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total" => Ok(DistributionType::Total),
            "average_per_minute" => Ok(DistributionType::AveragePerMinute),
            other => Err(format!("unknown distribution `{other}`")),
        }
    }
}

/// One minute of vehicle-class counts for one sensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrafficReading {
    pub sensor_id: String,
    pub ts: DateTime<Utc>,
    counts: [u32; 10],
}

impl TrafficReading {
    /// An all-zero reading.
    pub fn new(sensor_id: impl Into<String>, ts: DateTime<Utc>) -> Self {
        TrafficReading {
            sensor_id: sensor_id.into(),
            ts,
            counts: [0; 10],
        }
    }

    pub fn count(&self, class: VehicleClass) -> u32 {
        self.counts[class.index()]
    }

    /// Sets one column verbatim. Setting a subcategory does not update
    /// `hgv`; call [`TrafficReading::with_hgv_parts`] or
    /// [`TrafficReading::recompute_hgv`] for that.
    pub fn set_count(&mut self, class: VehicleClass, value: u32) {
        self.counts[class.index()] = value;
    }

    pub fn with(mut self, class: VehicleClass, value: u32) -> Self {
        self.set_count(class, value);
        self
    }

    pub fn recompute_hgv(&mut self) {
        let sum = VehicleClass::HGV_PARTS.iter().map(|c| self.count(*c)).sum();
        self.set_count(VehicleClass::Hgv, sum);
    }

    pub fn with_hgv_parts(mut self) -> Self {
        self.recompute_hgv();
        self
    }

    /// Sum over the given classes.
    pub fn sum(&self, classes: &[VehicleClass]) -> u64 {
        classes.iter().map(|c| u64::from(self.count(*c))).sum()
    }

    pub fn validate(&self) -> Result<(), PayloadError> {
        validate_sensor_id(&self.sensor_id)?;
        if self.ts.second() != 0 || self.ts.nanosecond() != 0 {
            return Err(PayloadError::InvariantViolation(format!(
                "traffic timestamp {} is not aligned to a minute",
                format_ts(&self.ts)
            )));
        }
        let parts: u64 = self.sum(&VehicleClass::HGV_PARTS);
        if parts != u64::from(self.count(VehicleClass::Hgv)) {
            return Err(PayloadError::InvariantViolation(format!(
                "hgv = {} but subcategories sum to {parts}",
                self.count(VehicleClass::Hgv)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingEventKind {
    Motion,
    LightOn,
    LightOff,
}

impl LightingEventKind {
    pub const ALL: [LightingEventKind; 3] = [
        LightingEventKind::Motion,
        LightingEventKind::LightOn,
        LightingEventKind::LightOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LightingEventKind::Motion => "motion",
            LightingEventKind::LightOn => "light_on",
            LightingEventKind::LightOff => "light_off",
        }
    }
}

impl FromStr for LightingEventKind {
    type Err = PayloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LightingEventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PayloadError::InvariantViolation(format!("unknown event `{s}`")))
    }
}

/// A motion, light_on or light_off event at one location.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LightingEvent {
    pub sensor_id: String,
    pub ts: DateTime<Utc>,
    pub event: LightingEventKind,
}

impl LightingEvent {
    pub fn new(sensor_id: impl Into<String>, ts: DateTime<Utc>, event: LightingEventKind) -> Self {
        LightingEvent {
            sensor_id: sensor_id.into(),
            ts,
            event,
        }
    }

    pub fn validate(&self) -> Result<(), PayloadError> {
        validate_sensor_id(&self.sensor_id)?;
        if self.ts.nanosecond() != 0 {
            return Err(PayloadError::InvariantViolation(format!(
                "lighting timestamp {} has sub-second precision",
                self.ts
            )));
        }
        Ok(())
    }
}

/// Sensor ids double as a topic level, so they must be non-empty and free
/// of `/`, `+`, `#` and NUL.
pub fn validate_sensor_id(id: &str) -> Result<(), PayloadError> {
    if id.is_empty() {
        return Err(PayloadError::InvariantViolation("empty sensor_id".into()));
    }
    if id.contains(['/', '+', '#', '\0']) {
        return Err(PayloadError::InvariantViolation(format!(
            "sensor_id `{id}` contains a reserved character"
        )));
    }
    Ok(())
}

/// RFC-3339, UTC, `Z` suffix, whole seconds.
pub fn format_ts(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_ts(s: &str) -> Result<DateTime<Utc>, PayloadError> {
    if !s.ends_with('Z') {
        return Err(PayloadError::Malformed(format!(
            "timestamp `{s}` is not UTC with a `Z` suffix"
        )));
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| PayloadError::Malformed(format!("timestamp `{s}`: {e}")))
}

#[derive(Serialize)]
struct TrafficWire<'a> {
    sensor_id: &'a str,
    ts: String,
    twmv: u32,
    carv: u32,
    busv: u32,
    lgv: u32,
    hgv: u32,
    hgvr2: u32,
    hgvr3: u32,
    hgvr4: u32,
    hgva3: u32,
    hgva5: u32,
}

// Counts are read as i64 so that negative values surface as invariant
// violations rather than type errors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrafficWireIn {
    sensor_id: String,
    ts: String,
    twmv: i64,
    carv: i64,
    busv: i64,
    lgv: i64,
    hgv: i64,
    hgvr2: i64,
    hgvr3: i64,
    hgvr4: i64,
    hgva3: i64,
    hgva5: i64,
}

pub fn encode_traffic(reading: &TrafficReading) -> Vec<u8> {
    debug_assert!(reading.validate().is_ok(), "encoding an invalid reading");
    let c = |class| reading.count(class);
    let wire = TrafficWire {
        sensor_id: &reading.sensor_id,
        ts: format_ts(&reading.ts),
        twmv: c(VehicleClass::Twmv),
        carv: c(VehicleClass::Carv),
        busv: c(VehicleClass::Busv),
        lgv: c(VehicleClass::Lgv),
        hgv: c(VehicleClass::Hgv),
        hgvr2: c(VehicleClass::Hgvr2),
        hgvr3: c(VehicleClass::Hgvr3),
        hgvr4: c(VehicleClass::Hgvr4),
        hgva3: c(VehicleClass::Hgva3),
        hgva5: c(VehicleClass::Hgva5),
    };
    serde_json::to_vec(&wire).expect("serializing plain struct")
}

pub fn decode_traffic(bytes: &[u8]) -> Result<TrafficReading, PayloadError> {
    let wire: TrafficWireIn =
        serde_json::from_slice(bytes).map_err(|e| PayloadError::Malformed(e.to_string()))?;
    let ts = parse_ts(&wire.ts)?;
    let raw = [
        wire.twmv, wire.carv, wire.busv, wire.lgv, wire.hgv, wire.hgvr2, wire.hgvr3, wire.hgvr4,
        wire.hgva3, wire.hgva5,
    ];
    let mut reading = TrafficReading::new(wire.sensor_id, ts);
    for (class, value) in VehicleClass::ALL.into_iter().zip(raw) {
        let value = u32::try_from(value).map_err(|_| {
            PayloadError::InvariantViolation(format!("{} = {value} is out of range", class.key()))
        })?;
        reading.set_count(class, value);
    }
    reading.validate()?;
    Ok(reading)
}

#[derive(Serialize)]
struct LightingWire<'a> {
    sensor_id: &'a str,
    ts: String,
    event: &'static str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LightingWireIn {
    sensor_id: String,
    ts: String,
    event: String,
}

pub fn encode_lighting(event: &LightingEvent) -> Vec<u8> {
    debug_assert!(event.validate().is_ok(), "encoding an invalid event");
    let wire = LightingWire {
        sensor_id: &event.sensor_id,
        ts: format_ts(&event.ts),
        event: event.event.as_str(),
    };
    serde_json::to_vec(&wire).expect("serializing plain struct")
}

pub fn decode_lighting(bytes: &[u8]) -> Result<LightingEvent, PayloadError> {
    let wire: LightingWireIn =
        serde_json::from_slice(bytes).map_err(|e| PayloadError::Malformed(e.to_string()))?;
    let ts = parse_ts(&wire.ts)?;
    let kind = wire.event.parse()?;
    let event = LightingEvent::new(wire.sensor_id, ts, kind);
    event.validate()?;
    Ok(event)
}

/// A decoded payload of either use case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Traffic(TrafficReading),
    Lighting(LightingEvent),
}

impl Payload {
    pub fn decode(use_case: UseCase, bytes: &[u8]) -> Result<Self, PayloadError> {
        match use_case {
            UseCase::Traffic => decode_traffic(bytes).map(Payload::Traffic),
            UseCase::Lighting => decode_lighting(bytes).map(Payload::Lighting),
        }
    }

    pub fn sensor_id(&self) -> &str {
        match self {
            Payload::Traffic(r) => &r.sensor_id,
            Payload::Lighting(e) => &e.sensor_id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::Traffic(r) => encode_traffic(r),
            Payload::Lighting(e) => encode_lighting(e),
        }
    }
}
