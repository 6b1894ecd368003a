//! Scenario files: one JSON document configuring every stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::broker::server::DEFAULT_PORT as BROKER_PORT;
use crate::gateway::DEFAULT_PORT as GATEWAY_PORT;
use crate::model::UseCase;
use crate::simulators::{ConfigError, LightingSimConfig, TrafficSimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSection {
    #[serde(default = "broker_port")]
    pub port: u16,
}

fn broker_port() -> u16 {
    BROKER_PORT
}

impl Default for BrokerSection {
    fn default() -> Self {
        BrokerSection { port: BROKER_PORT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSection {
    #[serde(default = "data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "partitions")]
    pub partitions: u32,
}

fn data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn partitions() -> u32 {
    4
}

impl Default for LogSection {
    fn default() -> Self {
        LogSection {
            data_dir: data_dir(),
            partitions: partitions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    #[serde(default = "gateway_port")]
    pub port: u16,
    /// Allowed CORS origin; absent allows any.
    #[serde(default)]
    pub cors_origin: Option<String>,
}

fn gateway_port() -> u16 {
    GATEWAY_PORT
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            port: GATEWAY_PORT,
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub broker: BrokerSection,
    #[serde(default)]
    pub log: LogSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<LightingSimConfig>,
    #[serde(default)]
    pub gateway: GatewaySection,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        source: ConfigError,
    },
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<ScenarioFile, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        let scenario: ScenarioFile = serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
            path: path.to_owned(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate().map_err(|source| ScenarioError::Invalid {
            path: path.to_owned(),
            source,
        })?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let prefixed = |section: &str, e: ConfigError| ConfigError {
            field: format!("{section}.{}", e.field),
            message: e.message,
        };
        if self.log.partitions == 0 {
            return Err(ConfigError {
                field: "log.partitions".into(),
                message: "must be at least 1".into(),
            });
        }
        if let Some(t) = &self.traffic {
            t.validate().map_err(|e| prefixed("traffic", e))?;
        }
        if let Some(l) = &self.lighting {
            l.validate().map_err(|e| prefixed("lighting", e))?;
        }
        Ok(())
    }

    /// `demo` and `verify` need something to simulate.
    pub fn require_simulator(&self) -> Result<(), ConfigError> {
        if self.traffic.is_none() && self.lighting.is_none() {
            return Err(ConfigError {
                field: "traffic".into(),
                message: "at least one of `traffic` or `lighting` is required".into(),
            });
        }
        Ok(())
    }

    /// Display labels for the gateway.
    pub fn labels(&self) -> BTreeMap<UseCase, BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(t) = &self.traffic {
            out.insert(UseCase::Traffic, t.sensors.iter().map(|s| (s.id.clone(), s.label.clone())).collect());
        }
        if let Some(l) = &self.lighting {
            out.insert(UseCase::Lighting, l.locations.iter().map(|s| (s.id.clone(), s.label.clone())).collect());
        }
        out
    }

    /// Lamp power for energy queries.
    pub fn power_w(&self) -> f64 {
        self.lighting
            .as_ref()
            .map_or(crate::simulators::config::DEFAULT_POWER_W, |l| l.power_w)
    }
}
