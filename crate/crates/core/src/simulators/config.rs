use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::rng::MAX_LAMBDA;
use crate::model::{validate_sensor_id, VehicleClass};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    #[serde(default)]
    pub label: String,
}

impl SensorSpec {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        SensorSpec {
            id: id.into(),
            label: label.into(),
        }
    }
}

pub const DEFAULT_DIURNAL_PROFILE: [f64; 24] = [
    0.15, 0.10, 0.07, 0.05, 0.07, 0.15, 0.35, 0.65, 0.90, 1.00, 0.80, 0.65, //
    0.60, 0.60, 0.62, 0.70, 0.85, 0.95, 1.00, 0.80, 0.55, 0.40, 0.30, 0.20,
];

/// Expected motions per hour for an office-like room.
pub const DEFAULT_MOTION_RATE_PROFILE: [f64; 24] = [
    0.2, 0.1, 0.1, 0.1, 0.1, 0.3, 1.0, 4.0, 10.0, 12.0, 12.0, 10.0, //
    8.0, 10.0, 12.0, 10.0, 8.0, 6.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.3,
];

pub const DEFAULT_BASE_RATE: f64 = 20.0;
pub const DEFAULT_HOLD_SECONDS: u32 = 180;
pub const DEFAULT_POWER_W: f64 = 40.0;

pub fn default_class_mix() -> BTreeMap<VehicleClass, f64> {
    use VehicleClass::*;
    BTreeMap::from([
        (Carv, 0.55),
        (Twmv, 0.25),
        (Lgv, 0.09),
        (Busv, 0.05),
        (Hgv, 0.06),
        (Hgvr2, 0.40),
        (Hgvr3, 0.25),
        (Hgvr4, 0.15),
        (Hgva3, 0.12),
        (Hgva5, 0.08),
    ])
}

fn default_diurnal() -> [f64; 24] {
    DEFAULT_DIURNAL_PROFILE
}
fn default_motion() -> [f64; 24] {
    DEFAULT_MOTION_RATE_PROFILE
}
fn default_base_rate() -> f64 {
    DEFAULT_BASE_RATE
}
fn default_hold() -> u32 {
    DEFAULT_HOLD_SECONDS
}
fn default_power() -> f64 {
    DEFAULT_POWER_W
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSimConfig {
    pub seed: u64,
    pub sensors: Vec<SensorSpec>,
    /// Backfill window; both absent means live mode.
    #[serde(default)]
    pub start_ts: Option<DateTime<Utc>>,
    #[serde(default)]
    pub end_ts: Option<DateTime<Utc>>,
    /// Vehicles per minute when the diurnal profile is 1.
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    /// Top-level weights sum to 1; the five hgv subcategory weights split
    /// the hgv share and also sum to 1.
    #[serde(default = "default_class_mix")]
    pub class_mix: BTreeMap<VehicleClass, f64>,
    #[serde(default = "default_diurnal")]
    pub diurnal_profile: [f64; 24],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightingSimConfig {
    pub seed: u64,
    pub locations: Vec<SensorSpec>,
    #[serde(default)]
    pub start_ts: Option<DateTime<Utc>>,
    #[serde(default)]
    pub end_ts: Option<DateTime<Utc>>,
    /// Expected motions per hour, indexed by UTC hour.
    #[serde(default = "default_motion")]
    pub motion_rate_profile: [f64; 24],
    #[serde(default = "default_hold")]
    pub hold_seconds: u32,
    #[serde(default = "default_power")]
    pub power_w: f64,
}

impl TrafficSimConfig {
    pub fn with_defaults(seed: u64, sensors: Vec<SensorSpec>) -> Self {
        TrafficSimConfig {
            seed,
            sensors,
            start_ts: None,
            end_ts: None,
            base_rate: DEFAULT_BASE_RATE,
            class_mix: default_class_mix(),
            diurnal_profile: DEFAULT_DIURNAL_PROFILE,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_sensors("sensors", &self.sensors)?;
        validate_window(self.start_ts, self.end_ts)?;
        if !self.base_rate.is_finite() || self.base_rate < 0.0 || self.base_rate > MAX_LAMBDA {
            return Err(err("base_rate", format!("must be in [0, {MAX_LAMBDA}]")));
        }
        for (h, v) in self.diurnal_profile.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(err(format!("diurnal_profile[{h}]"), "must be in [0, 1]"));
            }
        }
        for (class, w) in &self.class_mix {
            if !w.is_finite() || *w < 0.0 {
                return Err(err(format!("class_mix.{class}"), "must be a non-negative number"));
            }
        }
        let weight = |c: VehicleClass| self.class_mix.get(&c).copied().unwrap_or(0.0);
        let top: f64 = VehicleClass::TOP_LEVEL.iter().map(|c| weight(*c)).sum();
        if (top - 1.0).abs() > SUM_TOLERANCE {
            return Err(err("class_mix", format!("top-level weights sum to {top}, not 1")));
        }
        let parts: f64 = VehicleClass::HGV_PARTS.iter().map(|c| weight(*c)).sum();
        if weight(VehicleClass::Hgv) > 0.0 && (parts - 1.0).abs() > SUM_TOLERANCE {
            return Err(err("class_mix", format!("hgv subcategory weights sum to {parts}, not 1")));
        }
        Ok(())
    }

    /// Per-class rate multipliers in payload key order; `hgv` itself is 0
    /// because it is derived from its parts.
    pub fn class_weights(&self) -> [f64; 10] {
        let weight = |c: VehicleClass| self.class_mix.get(&c).copied().unwrap_or(0.0);
        let hgv = weight(VehicleClass::Hgv);
        VehicleClass::ALL.map(|c| {
            if c == VehicleClass::Hgv {
                0.0
            } else if VehicleClass::HGV_PARTS.contains(&c) {
                hgv * weight(c)
            } else {
                weight(c)
            }
        })
    }
}

impl LightingSimConfig {
    pub fn with_defaults(seed: u64, locations: Vec<SensorSpec>) -> Self {
        LightingSimConfig {
            seed,
            locations,
            start_ts: None,
            end_ts: None,
            motion_rate_profile: DEFAULT_MOTION_RATE_PROFILE,
            hold_seconds: DEFAULT_HOLD_SECONDS,
            power_w: DEFAULT_POWER_W,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_sensors("locations", &self.locations)?;
        validate_window(self.start_ts, self.end_ts)?;
        for (h, v) in self.motion_rate_profile.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 || *v / 60.0 > MAX_LAMBDA {
                return Err(err(format!("motion_rate_profile[{h}]"), "must be a non-negative rate"));
            }
        }
        if self.hold_seconds == 0 {
            return Err(err("hold_seconds", "must be positive"));
        }
        if !self.power_w.is_finite() || self.power_w <= 0.0 {
            return Err(err("power_w", "must be positive"));
        }
        Ok(())
    }
}

fn validate_sensors(field: &str, sensors: &[SensorSpec]) -> Result<(), ConfigError> {
    if sensors.is_empty() {
        return Err(err(field, "at least one entry required"));
    }
    let mut seen = BTreeSet::new();
    for (i, s) in sensors.iter().enumerate() {
        validate_sensor_id(&s.id).map_err(|e| err(format!("{field}[{i}].id"), e.to_string()))?;
        if !seen.insert(&s.id) {
            return Err(err(format!("{field}[{i}].id"), format!("duplicate id {}", s.id)));
        }
    }
    Ok(())
}

fn validate_window(
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
) -> Result<(), ConfigError> {
    for (name, ts) in [("start_ts", start), ("end_ts", end)] {
        if let Some(ts) = ts {
            if ts.second() != 0 || ts.nanosecond() != 0 {
                return Err(err(name, "must be aligned to a minute"));
            }
        }
    }
    match (start, end) {
        (Some(s), Some(e)) if s >= e => Err(err("end_ts", "must be after start_ts")),
        (Some(_), None) | (None, Some(_)) => {
            Err(err("start_ts", "start_ts and end_ts must be given together"))
        }
        _ => Ok(()),
    }
}
