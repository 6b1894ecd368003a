//! Desk-scale IoT testbed: simulators publish over an embedded MQTT broker,
//! a bridge persists messages into a partitioned log, and a store serves
//! aggregates to an HTTP gateway.

pub mod broker;
pub mod client;
pub mod eventlog;
pub mod gateway;
pub mod logging;
pub mod model;
pub mod pipeline;
pub mod scenario;
pub mod simulators;
pub mod store;
