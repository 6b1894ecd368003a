//! Seeded traffic and lighting generators and their MQTT publishers.

pub mod config;
pub mod lighting;
pub mod publish;
pub mod rng;
pub mod traffic;

pub use config::{ConfigError, LightingSimConfig, SensorSpec, TrafficSimConfig};
pub use lighting::{lighting_events, lighting_step, LightState};
pub use publish::{lighting_messages, traffic_messages, Clock, Message};
pub use rng::{poisson_sample, rng_next, SplitMix64};
pub use traffic::traffic_tick;
