//! Broker → log bridge.
//!
//! Subscribes at QoS 1, validates each payload, appends it to the mapped
//! stream and only then acknowledges it. Messages that fail validation are
//! appended verbatim to `<stream>.dlq` (keyed by topic) and acknowledged.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::sync::{mpsc, watch, Notify};

use super::{EventLog, LogError};
use crate::broker::codec::QoS;
use crate::broker::topic::{topic_matches, TopicFilter};
use crate::client::{ClientError, ClientOptions, Incoming, MqttClient};
use crate::model::{Payload, UseCase};

pub const DEFAULT_BATCH_MAX: usize = 1024;

#[derive(Debug, Clone)]
pub struct BridgeRoute {
    pub filter: TopicFilter,
    pub stream: String,
    pub use_case: UseCase,
}

impl BridgeRoute {
    /// The standard routes: `city/traffic/+` → "traffic" and
    /// `building/lighting/+` → "lighting".
    pub fn defaults() -> Vec<BridgeRoute> {
        vec![
            BridgeRoute {
                filter: TopicFilter::new("city/traffic/+").expect("valid filter"),
                stream: "traffic".into(),
                use_case: UseCase::Traffic,
            },
            BridgeRoute {
                filter: TopicFilter::new("building/lighting/+").expect("valid filter"),
                stream: "lighting".into(),
                use_case: UseCase::Lighting,
            },
        ]
    }
}

pub fn dlq_stream(stream: &str) -> String {
    format!("{stream}.dlq")
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub client: ClientOptions,
    pub routes: Vec<BridgeRoute>,
    pub batch_max: usize,
}

impl BridgeConfig {
    pub fn new(broker_addr: impl Into<String>) -> Self {
        BridgeConfig {
            client: ClientOptions::new(broker_addr, "testbed-bridge"),
            routes: BridgeRoute::defaults(),
            batch_max: DEFAULT_BATCH_MAX,
        }
    }
}

#[derive(Debug, Default)]
pub struct BridgeStats {
    pub received: AtomicU64,
    pub appended: AtomicU64,
    pub dead_lettered: AtomicU64,
    pub unrouted: AtomicU64,
    pub batches: AtomicU64,
    pub append_failures: AtomicU64,
}

impl BridgeStats {
    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("received", self.received.load(Ordering::Relaxed)),
            ("appended", self.appended.load(Ordering::Relaxed)),
            ("dead_lettered", self.dead_lettered.load(Ordering::Relaxed)),
            ("unrouted", self.unrouted.load(Ordering::Relaxed)),
            ("batches", self.batches.load(Ordering::Relaxed)),
            ("append_failures", self.append_failures.load(Ordering::Relaxed)),
        ])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("broker refused subscription to {0}")]
    SubscribeRefused(String),
}

/// Where a message ends up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Routed {
    Record { stream: String, key: Vec<u8>, value: Vec<u8> },
    DeadLetter { stream: String, key: Vec<u8>, value: Vec<u8> },
    Unrouted,
}

/// Classifies one message against the route table. Valid payloads are
/// re-encoded canonically.
pub fn route_message(routes: &[BridgeRoute], topic: &crate::broker::topic::TopicName, payload: &[u8]) -> Routed {
    let Some(route) = routes.iter().find(|r| topic_matches(&r.filter, topic)) else {
        return Routed::Unrouted;
    };
    match Payload::decode(route.use_case, payload) {
        Ok(p) => Routed::Record {
            stream: route.stream.clone(),
            key: p.sensor_id().as_bytes().to_vec(),
            value: p.encode(),
        },
        Err(_) => Routed::DeadLetter {
            stream: dlq_stream(&route.stream),
            key: topic.as_str().as_bytes().to_vec(),
            value: payload.to_vec(),
        },
    }
}

/// Appends one batch and returns how many records went to dead-letter
/// streams.
fn persist(log: &EventLog, routed: &[Routed]) -> Result<(u64, u64), LogError> {
    let mut per_stream: BTreeMap<&str, Vec<(&[u8], &[u8])>> = BTreeMap::new();
    let (mut ok, mut dlq) = (0, 0);
    for r in routed {
        match r {
            Routed::Record { stream, key, value } => {
                ok += 1;
                per_stream.entry(stream).or_default().push((key, value));
            }
            Routed::DeadLetter { stream, key, value } => {
                dlq += 1;
                per_stream.entry(stream).or_default().push((key, value));
            }
            Routed::Unrouted => {}
        }
    }
    for (stream, records) in per_stream {
        log.append_batch(stream, &records)?;
    }
    Ok((ok, dlq))
}

pub struct Bridge {
    log: Arc<EventLog>,
    config: BridgeConfig,
    stats: Arc<BridgeStats>,
    appended: Arc<Notify>,
}

impl Bridge {
    pub fn new(log: Arc<EventLog>, config: BridgeConfig) -> Result<Bridge, LogError> {
        for r in &config.routes {
            log.ensure_stream(&r.stream)?;
            log.ensure_stream(&dlq_stream(&r.stream))?;
        }
        Ok(Bridge {
            log,
            config,
            stats: Arc::new(BridgeStats::default()),
            appended: Arc::new(Notify::new()),
        })
    }

    pub fn stats(&self) -> Arc<BridgeStats> {
        Arc::clone(&self.stats)
    }

    /// Signalled after every durable batch.
    pub fn appended(&self) -> Arc<Notify> {
        Arc::clone(&self.appended)
    }

    /// Runs until `shutdown` becomes true. Connection loss is handled by the
    /// client, which reconnects with backoff and resubscribes.
    pub async fn run(self, mut shutdown: watch::Receiver<bool>) -> Result<(), BridgeError> {
        let (client, mut rx) = tokio::select! {
            r = MqttClient::connect(self.config.client.clone()) => r?,
            _ = shutdown.wait_for(|s| *s) => return Ok(()),
        };
        let filters: Vec<_> = self
            .config
            .routes
            .iter()
            .map(|r| (r.filter.clone(), QoS::AtLeastOnce))
            .collect();
        let codes = client.subscribe(filters).await?;
        for (code, route) in codes.iter().zip(&self.config.routes) {
            if *code == crate::broker::codec::SubackCode::Failure {
                return Err(BridgeError::SubscribeRefused(route.filter.to_string()));
            }
        }
        log::info!("bridge subscribed to {} routes", self.config.routes.len());
        let result = self.pump(&client, &mut rx, &mut shutdown).await;
        client.disconnect().await;
        result
    }

    async fn pump(
        &self,
        client: &MqttClient,
        rx: &mut mpsc::Receiver<Incoming>,
        shutdown: &mut watch::Receiver<bool>,
    ) -> Result<(), BridgeError> {
        let mut batch: Vec<Incoming> = Vec::with_capacity(self.config.batch_max);
        loop {
            tokio::select! {
                msg = rx.recv() => match msg {
                    Some(m) => batch.push(m),
                    None => return Err(ClientError::Closed.into()),
                },
                _ = shutdown.wait_for(|s| *s) => return Ok(()),
            }
            while batch.len() < self.config.batch_max {
                match rx.try_recv() {
                    Ok(m) => batch.push(m),
                    Err(_) => break,
                }
            }
            let routed: Vec<Routed> = batch
                .iter()
                .map(|m| route_message(&self.config.routes, &m.topic, &m.payload))
                .collect();
            let unrouted = routed.iter().filter(|r| **r == Routed::Unrouted).count() as u64;
            let log = Arc::clone(&self.log);
            let outcome = tokio::task::spawn_blocking(move || persist(&log, &routed))
                .await
                .expect("append task panicked");
            self.stats.received.fetch_add(batch.len() as u64, Ordering::Relaxed);
            match outcome {
                Ok((ok, dlq)) => {
                    for m in &batch {
                        client.ack(m);
                    }
                    self.stats.appended.fetch_add(ok, Ordering::Relaxed);
                    self.stats.dead_lettered.fetch_add(dlq, Ordering::Relaxed);
                    self.stats.unrouted.fetch_add(unrouted, Ordering::Relaxed);
                    self.stats.batches.fetch_add(1, Ordering::Relaxed);
                    self.appended.notify_waiters();
                }
                Err(e) => {
                    // Left unacknowledged: the broker redelivers them.
                    self.stats.append_failures.fetch_add(1, Ordering::Relaxed);
                    log::error!("append of {} messages failed: {e}", batch.len());
                    tokio::time::sleep(std::time::Duration::from_millis(500)).await;
                }
            }
            batch.clear();
        }
    }
}
