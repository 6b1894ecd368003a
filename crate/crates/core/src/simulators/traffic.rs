use chrono::{DateTime, Timelike, Utc};

use super::config::TrafficSimConfig;
use super::rng::{poisson_sample, rng_next, SplitMix64};
use crate::eventlog::fnv1a64;
use crate::model::{TrafficReading, VehicleClass};

/// Independent generator for one (sensor, minute): the result never depends
/// on which other minutes or sensors were generated before.
pub fn substream(seed: u64, sensor_id: &str, ts: DateTime<Utc>) -> SplitMix64 {
    let minute_epoch = ts.timestamp().div_euclid(60) as u64;
    let mixed = seed ^ fnv1a64(sensor_id.as_bytes()) ^ minute_epoch;
    SplitMix64::new(rng_next(mixed).1)
}

/// One reading for `sensor_id` covering the minute starting at `minute_ts`.
/// The config must have passed validation.
pub fn traffic_tick(config: &TrafficSimConfig, sensor_id: &str, minute_ts: DateTime<Utc>) -> TrafficReading {
    debug_assert_eq!(minute_ts.second(), 0);
    let mut rng = substream(config.seed, sensor_id, minute_ts);
    let lambda_total = config.base_rate * config.diurnal_profile[minute_ts.hour() as usize];
    let weights = config.class_weights();
    let mut reading = TrafficReading::new(sensor_id, minute_ts);
    for (class, weight) in VehicleClass::ALL.into_iter().zip(weights) {
        if class == VehicleClass::Hgv {
            continue;
        }
        let n = poisson_sample(&mut rng, lambda_total * weight).expect("validated rate");
        reading.set_count(class, u32::try_from(n).unwrap_or(u32::MAX));
    }
    reading.recompute_hgv();
    reading
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_traffic;
    use crate::simulators::config::SensorSpec;

    fn config() -> TrafficSimConfig {
        TrafficSimConfig::with_defaults(42, vec![SensorSpec::new("S01", "")])
    }

    fn ts(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    #[test]
    fn golden_reading() {
        let r = traffic_tick(&config(), "S01", ts("2017-03-01T08:00:00Z"));
        let json = String::from_utf8(encode_traffic(&r)).unwrap();
        assert_eq!(json, include_str!("../../tests/golden/traffic_seed42_S01_0800.json").trim());
    }

    #[test]
    fn zero_profile_hour_gives_zero_reading() {
        let mut c = config();
        c.diurnal_profile[3] = 0.0;
        let r = traffic_tick(&c, "S01", ts("2017-03-01T03:00:00Z"));
        assert_eq!(r, TrafficReading::new("S01", ts("2017-03-01T03:00:00Z")));
    }

    #[test]
    fn deterministic_and_valid() {
        let c = config();
        for m in 0..200 {
            let t = ts("2017-03-01T00:00:00Z") + chrono::Duration::minutes(m * 7);
            let a = traffic_tick(&c, "S01", t);
            assert_eq!(a, traffic_tick(&c, "S01", t));
            a.validate().unwrap();
        }
    }

    #[test]
    fn class_means_converge() {
        let mut c = config();
        c.diurnal_profile = [1.0; 24];
        let start = ts("2017-03-01T00:00:00Z");
        let n = 20_000;
        let mut sums = [0u64; 10];
        for m in 0..n {
            let r = traffic_tick(&c, "S01", start + chrono::Duration::minutes(m));
            for (i, class) in VehicleClass::ALL.into_iter().enumerate() {
                sums[i] += u64::from(r.count(class));
            }
        }
        let weights = c.class_weights();
        for (i, class) in VehicleClass::ALL.into_iter().enumerate() {
            let expected = if class == VehicleClass::Hgv {
                c.base_rate * 0.06
            } else {
                c.base_rate * weights[i]
            };
            let mean = sums[i] as f64 / n as f64;
            // Four standard errors of a Poisson mean.
            let tol = 4.0 * (expected / n as f64).sqrt();
            assert!((mean - expected).abs() <= tol, "{class}: {mean} vs {expected}");
        }
    }
}
