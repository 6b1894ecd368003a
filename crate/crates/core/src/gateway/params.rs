//! Query-string parsing for the API. Every failure names the parameter.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::NaiveDate;

use crate::model::{DistributionType, UseCase, VehicleClass};
use crate::store::{Bucket, GroupBy, InvalidSpec, QuerySpec};

pub type Params = Vec<(String, String)>;

struct Reader {
    values: BTreeMap<String, String>,
}

impl Reader {
    fn new(params: Params, allowed: &[&str]) -> Result<Reader, InvalidSpec> {
        let mut values = BTreeMap::new();
        for (k, v) in params {
            if !allowed.contains(&k.as_str()) {
                return Err(InvalidSpec::new(k, "unknown parameter"));
            }
            if values.insert(k.clone(), v).is_some() {
                return Err(InvalidSpec::new(k, "given more than once"));
            }
        }
        Ok(Reader { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&self, name: &str, default: Option<T>) -> Result<T, InvalidSpec>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(name) {
            Some(v) => v
                .parse()
                .map_err(|e| InvalidSpec::new(name, format!("`{v}`: {e}"))),
            None => default.ok_or_else(|| InvalidSpec::new(name, "required")),
        }
    }

    fn list(&self, name: &str) -> Vec<String> {
        self.get(name)
            .map(|v| v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn hour(&self, name: &str, default: u32) -> Result<u32, InvalidSpec> {
        let h: u32 = self.parse(name, Some(default))?;
        if h > 23 {
            return Err(InvalidSpec::new(name, format!("{h} is not in 0..=23")));
        }
        Ok(h)
    }
}

const SERIES_COMMON: [&str; 7] = ["from", "to", "hour_from", "hour_to", "sensors", "group_by", "bucket"];

fn series_spec(r: &Reader, use_case: UseCase) -> Result<QuerySpec, InvalidSpec> {
    let from: NaiveDate = r.parse("from", None)?;
    let to: NaiveDate = r.parse("to", Some(from))?;
    let mut spec = QuerySpec::new(use_case, from, to);
    spec.hour_from = r.hour("hour_from", 0)?;
    spec.hour_to = r.hour("hour_to", 23)?;
    spec.sensors = r.list("sensors");
    spec.group_by = r.parse::<GroupBy>("group_by", Some(GroupBy::TimeBucket))?;
    spec.bucket = r.parse::<Bucket>("bucket", Some(Bucket::Hour))?;
    Ok(spec)
}

/// `/api/traffic/series`. Omitted classes mean all ten.
pub fn traffic_spec(params: Params) -> Result<QuerySpec, InvalidSpec> {
    let mut allowed = SERIES_COMMON.to_vec();
    allowed.extend(["classes", "distribution"]);
    let r = Reader::new(params, &allowed)?;
    let mut spec = series_spec(&r, UseCase::Traffic)?;
    let classes = r.list("classes");
    if !classes.is_empty() {
        spec.classes = classes
            .iter()
            .map(|c| VehicleClass::from_str(c).map_err(|e| InvalidSpec::new("classes", e)))
            .collect::<Result<_, _>>()?;
    }
    spec.distribution = r.parse::<DistributionType>("distribution", Some(DistributionType::Total))?;
    spec.validate()?;
    Ok(spec)
}

/// `/api/lighting/energy`.
pub fn energy_spec(params: Params) -> Result<QuerySpec, InvalidSpec> {
    let r = Reader::new(params, &SERIES_COMMON)?;
    let spec = series_spec(&r, UseCase::Lighting)?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TotalParams {
    pub sensor: String,
    pub date: NaiveDate,
    pub hour_from: u32,
    pub hour_to: u32,
}

/// `/api/lighting/total`.
pub fn total_params(params: Params) -> Result<TotalParams, InvalidSpec> {
    let r = Reader::new(params, &["sensor", "date", "hour_from", "hour_to"])?;
    let sensor = r
        .get("sensor")
        .ok_or_else(|| InvalidSpec::new("sensor", "required"))?
        .to_owned();
    let date = r.parse("date", None)?;
    let hour_from = r.hour("hour_from", 0)?;
    let hour_to = r.hour("hour_to", 23)?;
    if hour_from > hour_to {
        return Err(InvalidSpec::new("hour_to", "must not be before `hour_from`"));
    }
    Ok(TotalParams {
        sensor,
        date,
        hour_from,
        hour_to,
    })
}
