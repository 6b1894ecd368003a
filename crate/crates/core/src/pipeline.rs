//! Stage runners shared by the CLI subcommands.
//!
//! Each long-running stage takes a `watch` shutdown signal and returns once
//! it flips to true. `demo` wires all of them together in one process with
//! the same interfaces the separate processes use.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Duration as ChronoDuration, DurationRound, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;

use crate::broker::{self, BrokerConfig, BrokerHandle, QoS};
use crate::client::{ClientError, ClientOptions, MqttClient};
use crate::eventlog::bridge::{dlq_stream, Bridge, BridgeConfig, BridgeError};
use crate::eventlog::{EventLog, LogConfig, LogError};
use crate::gateway::{Gateway, GatewayConfig, TickHub};
use crate::model::{decode_lighting, decode_traffic, UseCase};
use crate::scenario::ScenarioFile;
use crate::simulators::config::DEFAULT_POWER_W;
use crate::simulators::publish::{run_backfill, run_lighting_live, run_traffic_live, MqttSink, PublishStats};
use crate::simulators::{lighting_messages, traffic_messages, Clock, LightingSimConfig, Message, TrafficSimConfig};
use crate::store::consumer::{consume_available, rebuild_from_log, STORE_GROUP};
use crate::store::snapshot::{load_snapshot, write_snapshot, SnapshotError, SNAPSHOT_FILE};
use crate::store::{oracle, Bucket, GroupBy, IngestCounts, QueryError, QuerySpec, SeriesResult, Store, STREAMS};

/// How long the in-process brokers of `demo` and `verify` park publishes
/// that arrive before the bridge has (re)subscribed.
pub const HOLD_UNROUTED: Duration = Duration::from_secs(60);
const POLL: Duration = Duration::from_millis(200);
const SNAPSHOT_EVERY: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Failed(String),
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub fn snapshot_path(data_dir: &Path) -> PathBuf {
    data_dir.join(SNAPSHOT_FILE)
}

pub fn log_config(partitions: u32) -> LogConfig {
    LogConfig {
        default_partitions: partitions,
        ..LogConfig::default()
    }
}

async fn stopped(shutdown: &mut watch::Receiver<bool>) {
    let _ = shutdown.wait_for(|s| *s).await;
}

/// Loads the snapshot in `data_dir`, or an empty store.
pub fn load_store(data_dir: &Path, power_w: f64) -> Result<Store, PipelineError> {
    Ok(load_snapshot(&snapshot_path(data_dir), power_w)?.unwrap_or_else(|| Store::new(power_w)))
}

/// Opens `data_dir` as a follower, waiting for the writer to create it.
async fn open_follower_waiting(
    data_dir: &Path,
    shutdown: &mut watch::Receiver<bool>,
) -> Result<Option<EventLog>, PipelineError> {
    let mut warned = false;
    loop {
        if data_dir.is_dir() {
            return Ok(Some(EventLog::open_follower(data_dir, LogConfig::default())?));
        }
        if !warned {
            log::info!("waiting for a log at {}", data_dir.display());
            warned = true;
        }
        tokio::select! {
            _ = tokio::time::sleep(Duration::from_secs(1)) => {}
            _ = stopped(shutdown) => return Ok(None),
        }
    }
}

/// One consume pass. Returns the counts and the use cases whose row count
/// changed.
pub fn ingest_step(log: &EventLog, store: &Store, group: Option<&str>) -> Result<(IngestCounts, Vec<UseCase>), LogError> {
    log.refresh()?;
    let before = (store.traffic_row_count(), store.lighting_row_count());
    let counts = consume_available(log, store, group)?;
    let mut changed = Vec::new();
    if store.traffic_row_count() != before.0 {
        changed.push(UseCase::Traffic);
    }
    if store.lighting_row_count() != before.1 {
        changed.push(UseCase::Lighting);
    }
    Ok((counts, changed))
}

/// Keeps `store` caught up with `log`. Wakes on `appended` or every poll
/// interval, ticks the gateway for every use case that gained rows and
/// snapshots at most once a second. A final pass and snapshot run on
/// shutdown.
pub struct IngestLoop {
    pub log: Arc<EventLog>,
    pub store: Arc<Store>,
    pub ticks: Option<TickHub>,
    pub appended: Arc<Notify>,
    pub commit_group: Option<String>,
    pub snapshot: Option<PathBuf>,
}

impl IngestLoop {
    async fn pass(&self) -> Result<(IngestCounts, Vec<UseCase>), PipelineError> {
        let log = Arc::clone(&self.log);
        let store = Arc::clone(&self.store);
        let group = self.commit_group.clone();
        let r = tokio::task::spawn_blocking(move || ingest_step(&log, &store, group.as_deref()))
            .await
            .map_err(|e| PipelineError::Failed(e.to_string()))??;
        Ok(r)
    }

    async fn save(&self) -> Result<(), PipelineError> {
        if let Some(path) = self.snapshot.clone() {
            let store = Arc::clone(&self.store);
            tokio::task::spawn_blocking(move || write_snapshot(&store, &path))
                .await
                .map_err(|e| PipelineError::Failed(e.to_string()))??;
        }
        Ok(())
    }

    pub async fn run(self, mut shutdown: watch::Receiver<bool>) -> Result<IngestCounts, PipelineError> {
        let mut total = IngestCounts::default();
        let mut dirty = false;
        let mut last_save = Instant::now();
        loop {
            let notified = self.appended.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            match self.pass().await {
                Ok((counts, changed)) => {
                    if counts.total() > 0 {
                        log::debug!("ingested {counts:?}");
                        dirty = true;
                    }
                    total.merge(counts);
                    if let Some(ticks) = &self.ticks {
                        for uc in changed {
                            ticks.notify(uc);
                        }
                    }
                }
                Err(e) => log::error!("ingest pass failed: {e}"),
            }
            if dirty && last_save.elapsed() >= SNAPSHOT_EVERY {
                match self.save().await {
                    Ok(()) => dirty = false,
                    Err(e) => log::error!("snapshot failed: {e}"),
                }
                last_save = Instant::now();
            }
            tokio::select! {
                _ = &mut notified => {}
                _ = tokio::time::sleep(POLL) => {}
                _ = stopped(&mut shutdown) => break,
            }
        }
        let (counts, _) = self.pass().await?;
        total.merge(counts);
        self.save().await?;
        Ok(total)
    }
}

pub async fn run_broker(port: u16, shutdown: watch::Receiver<bool>) -> Result<(), PipelineError> {
    let mut shutdown = shutdown;
    let handle = broker::start(BrokerConfig {
        bind: SocketAddr::from(([0, 0, 0, 0], port)),
        ..BrokerConfig::default()
    })
    .await?;
    stopped(&mut shutdown).await;
    handle.shutdown().await;
    Ok(())
}

pub async fn run_bridge(
    broker_addr: &str,
    data_dir: &Path,
    partitions: u32,
    shutdown: watch::Receiver<bool>,
) -> Result<(), PipelineError> {
    let log = Arc::new(EventLog::open(data_dir, log_config(partitions))?);
    report_recovery(&log);
    let bridge = Bridge::new(log, BridgeConfig::new(broker_addr))?;
    let stats = bridge.stats();
    bridge.run(shutdown).await?;
    log::info!("bridge stopped: {:?}", stats.snapshot());
    Ok(())
}

fn report_recovery(log: &EventLog) {
    let r = log.recovery_report();
    log::info!(
        "log at {} holds {} records; truncated {} bytes in {} partitions",
        log.dir().display(),
        r.total_records(),
        r.truncated_bytes(),
        r.torn_tails()
    );
}

/// `testbed ingest`: follows the log, keeps the snapshot current and
/// commits the store group.
pub async fn run_ingest(data_dir: &Path, shutdown: watch::Receiver<bool>) -> Result<IngestCounts, PipelineError> {
    let mut shutdown = shutdown;
    let Some(log) = open_follower_waiting(data_dir, &mut shutdown).await? else {
        return Ok(IngestCounts::default());
    };
    let store = Arc::new(load_store(data_dir, DEFAULT_POWER_W)?);
    let counts = IngestLoop {
        log: Arc::new(log),
        store,
        ticks: None,
        appended: Arc::new(Notify::new()),
        commit_group: Some(STORE_GROUP.into()),
        snapshot: Some(snapshot_path(data_dir)),
    }
    .run(shutdown)
    .await?;
    log::info!("ingest stopped: {counts:?}");
    Ok(counts)
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub data_dir: PathBuf,
    pub power_w: f64,
    pub gateway: GatewayConfig,
}

/// `testbed serve`: starts from the snapshot and tails the log read-only.
pub async fn run_serve(
    listener: TcpListener,
    opts: ServeOptions,
    shutdown: watch::Receiver<bool>,
) -> Result<(), PipelineError> {
    let mut wait = shutdown.clone();
    let Some(log) = open_follower_waiting(&opts.data_dir, &mut wait).await? else {
        return Ok(());
    };
    let store = Arc::new(load_store(&opts.data_dir, opts.power_w)?);
    let ticks = TickHub::new();
    let tail = tokio::spawn(
        IngestLoop {
            log: Arc::new(log),
            store: Arc::clone(&store),
            ticks: Some(ticks.clone()),
            appended: Arc::new(Notify::new()),
            commit_group: None,
            snapshot: None,
        }
        .run(shutdown.clone()),
    );
    Gateway::new(store, ticks, opts.gateway, shutdown).run(listener).await?;
    join(tail).await?;
    Ok(())
}

async fn join<T>(task: JoinHandle<Result<T, PipelineError>>) -> Result<T, PipelineError> {
    task.await.map_err(|e| PipelineError::Failed(e.to_string()))?
}

/// Which window a simulator publishes: a fixed backfill or live.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimMode {
    Backfill {
        from: DateTime<Utc>,
        to: DateTime<Utc>,
        speedup: Option<f64>,
    },
    Live,
}

#[derive(Debug, Clone)]
pub enum SimConfig {
    Traffic(TrafficSimConfig),
    Lighting(LightingSimConfig),
}

impl SimConfig {
    pub fn use_case(&self) -> UseCase {
        match self {
            SimConfig::Traffic(_) => UseCase::Traffic,
            SimConfig::Lighting(_) => UseCase::Lighting,
        }
    }

    /// The configured window, if both ends are set.
    pub fn window(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let (s, e) = match self {
            SimConfig::Traffic(c) => (c.start_ts, c.end_ts),
            SimConfig::Lighting(c) => (c.start_ts, c.end_ts),
        };
        s.zip(e)
    }

    pub fn messages(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Vec<Message> {
        match self {
            SimConfig::Traffic(c) => traffic_messages(c, from, to),
            SimConfig::Lighting(c) => lighting_messages(c, from, to),
        }
    }

    pub fn from_scenario(scenario: &ScenarioFile) -> Vec<SimConfig> {
        let mut out = Vec::new();
        if let Some(t) = &scenario.traffic {
            out.push(SimConfig::Traffic(t.clone()));
        }
        if let Some(l) = &scenario.lighting {
            out.push(SimConfig::Lighting(l.clone()));
        }
        out
    }
}

/// Runs one simulator against the broker at `broker_addr`. A backfill
/// waits for every publish to be acknowledged before returning.
pub async fn run_sim(
    sim: SimConfig,
    mode: SimMode,
    broker_addr: &str,
    shutdown: watch::Receiver<bool>,
) -> Result<u64, PipelineError> {
    let mut stop = shutdown.clone();
    let opts = ClientOptions::new(broker_addr, format!("testbed-sim-{}", sim.use_case()));
    let (client, _incoming) = tokio::select! {
        r = MqttClient::connect(opts) => r?,
        _ = stopped(&mut stop) => return Ok(0),
    };
    let sink = MqttSink {
        client: client.clone(),
        stats: Arc::new(PublishStats::default()),
    };
    let sent = match (mode, &sim) {
        (SimMode::Backfill { from, to, speedup }, _) => {
            let msgs = sim.messages(from, to);
            log::info!("{}: backfilling {} messages from {from} to {to}", sim.use_case(), msgs.len());
            let sent = run_backfill(&sink, msgs, from, speedup, shutdown).await?;
            tokio::select! {
                r = client.flush() => r?,
                _ = stopped(&mut stop) => {}
            }
            sent
        }
        (SimMode::Live, SimConfig::Traffic(c)) => run_traffic_live(&sink, c, Clock::system(), shutdown).await?,
        (SimMode::Live, SimConfig::Lighting(c)) => run_lighting_live(&sink, c, Clock::system(), shutdown).await?,
    };
    log::info!("{}: published {sent} messages", sim.use_case());
    client.disconnect().await;
    Ok(sent)
}

#[derive(Debug, Clone, Default)]
pub struct DemoOptions {
    /// Paces backfills at this multiple of real time; unpaced if absent.
    pub speedup: Option<f64>,
    pub data_dir: Option<PathBuf>,
}

/// Every stage in one process.
pub struct Demo {
    pub broker_addr: SocketAddr,
    pub gateway_addr: SocketAddr,
    pub store: Arc<Store>,
    pub log: Arc<EventLog>,
    pub ticks: TickHub,
    shutdown: watch::Sender<bool>,
    broker: BrokerHandle,
    bridge: JoinHandle<Result<(), BridgeError>>,
    ingest: JoinHandle<Result<IngestCounts, PipelineError>>,
    gateway: JoinHandle<io::Result<()>>,
    sims: Vec<JoinHandle<Result<u64, PipelineError>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub published: u64,
    pub traffic_rows: usize,
    pub lighting_rows: usize,
}

impl Demo {
    pub async fn start(scenario: &ScenarioFile, opts: DemoOptions) -> Result<Demo, PipelineError> {
        scenario
            .require_simulator()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let data_dir = opts.data_dir.unwrap_or_else(|| scenario.log.data_dir.clone());
        let (shutdown, rx) = watch::channel(false);

        let broker = broker::start(BrokerConfig {
            bind: SocketAddr::from(([0, 0, 0, 0], scenario.broker.port)),
            hold_unrouted: Some(HOLD_UNROUTED),
            ..BrokerConfig::default()
        })
        .await?;
        let broker_addr = SocketAddr::from(([127, 0, 0, 1], broker.local_addr().port()));

        let log = Arc::new(EventLog::open(&data_dir, log_config(scenario.log.partitions))?);
        report_recovery(&log);
        let store = Arc::new(load_store(&data_dir, scenario.power_w())?);
        let ticks = TickHub::new();

        let bridge = Bridge::new(Arc::clone(&log), BridgeConfig::new(broker_addr.to_string()))?;
        let appended = bridge.appended();
        let bridge = tokio::spawn(bridge.run(rx.clone()));

        let ingest = tokio::spawn(
            IngestLoop {
                log: Arc::clone(&log),
                store: Arc::clone(&store),
                ticks: Some(ticks.clone()),
                appended,
                commit_group: Some(STORE_GROUP.into()),
                snapshot: Some(snapshot_path(&data_dir)),
            }
            .run(rx.clone()),
        );

        let listener = TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], scenario.gateway.port))).await?;
        let gateway_addr = SocketAddr::from(([127, 0, 0, 1], listener.local_addr()?.port()));
        let config = GatewayConfig {
            cors_origin: scenario.gateway.cors_origin.clone(),
            labels: scenario.labels(),
            ..GatewayConfig::default()
        };
        let gateway = tokio::spawn(Gateway::new(Arc::clone(&store), ticks.clone(), config, rx.clone()).run(listener));

        let sims = SimConfig::from_scenario(scenario)
            .into_iter()
            .map(|sim| {
                let mode = match sim.window() {
                    Some((from, to)) => SimMode::Backfill {
                        from,
                        to,
                        speedup: opts.speedup,
                    },
                    None => SimMode::Live,
                };
                let rx = rx.clone();
                let addr = broker_addr.to_string();
                tokio::spawn(async move { run_sim(sim, mode, &addr, rx).await })
            })
            .collect();

        Ok(Demo {
            broker_addr,
            gateway_addr,
            store,
            log,
            ticks,
            shutdown,
            broker,
            bridge,
            ingest,
            gateway,
            sims,
        })
    }

    /// Waits for every simulator to finish; only returns for backfills.
    pub async fn wait_for_simulators(&mut self) -> Result<u64, PipelineError> {
        let mut total = 0;
        for sim in self.sims.drain(..) {
            total += join(sim).await?;
        }
        Ok(total)
    }

    /// Stops every stage, flushes the store and writes a final snapshot.
    pub async fn stop(self) -> Result<DemoSummary, PipelineError> {
        let _ = self.shutdown.send(true);
        let mut published = 0;
        for sim in self.sims {
            published += join(sim).await.unwrap_or_else(|e| {
                log::warn!("simulator ended with {e}");
                0
            });
        }
        if let Err(e) = self.bridge.await.map_err(|e| PipelineError::Failed(e.to_string()))? {
            log::warn!("bridge ended with {e}");
        }
        join(self.ingest).await?;
        self.gateway.await.map_err(|e| PipelineError::Failed(e.to_string()))??;
        self.broker.shutdown().await;
        Ok(DemoSummary {
            published,
            traffic_rows: self.store.traffic_row_count(),
            lighting_rows: self.store.lighting_row_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub traffic_rows: usize,
    pub lighting_rows: usize,
    pub dead_letters: u64,
    pub log_records: u64,
    pub dlq_records: u64,
    pub duplicates: u64,
    pub truncated_bytes: u64,
    pub torn_tails: usize,
    pub alternation_violations: u64,
    /// False when another process holds the log and recovery was skipped.
    pub recovered: bool,
}

fn stream_records(log: &EventLog, stream: &str) -> u64 {
    let Ok(n) = log.partition_count(stream) else {
        return 0;
    };
    (0..n).filter_map(|p| log.high_watermark(stream, p).ok()).sum()
}

/// `testbed replay`: resets the store group, rebuilds from offset 0 and
/// replaces the snapshot.
pub fn replay(data_dir: &Path, power_w: f64) -> Result<ReplayReport, PipelineError> {
    if !data_dir.is_dir() {
        return Err(PipelineError::Config(format!("no log at {}", data_dir.display())));
    }
    let (log, recovered) = match EventLog::open(data_dir, LogConfig::default()) {
        Ok(log) => (log, true),
        Err(LogError::Locked) => {
            log::warn!("log is held by another process; replaying without recovery");
            (EventLog::open_follower(data_dir, LogConfig::default())?, false)
        }
        Err(e) => return Err(e.into()),
    };
    let store = Store::new(power_w);
    let counts = rebuild_from_log(&log, &store)?;
    write_snapshot(&store, &snapshot_path(data_dir))?;
    let r = log.recovery_report();
    Ok(ReplayReport {
        traffic_rows: store.traffic_row_count(),
        lighting_rows: store.lighting_row_count(),
        dead_letters: store.dead_letters(),
        log_records: STREAMS.iter().map(|s| stream_records(&log, s)).sum(),
        dlq_records: STREAMS.iter().map(|s| stream_records(&log, &dlq_stream(s))).sum(),
        duplicates: counts.duplicate,
        truncated_bytes: r.truncated_bytes(),
        torn_tails: r.torn_tails(),
        alternation_violations: store.alternation_violations(),
        recovered,
    })
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub minutes: u32,
    /// Keep the log and snapshot here; a temporary directory otherwise.
    pub data_dir: Option<PathBuf>,
    /// Kill and restart the broker this many times while publishing.
    pub broker_restarts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    pub published: u64,
    pub broker_restarts: u32,
    pub expected_traffic_rows: usize,
    pub traffic_rows: usize,
    pub expected_lighting_rows: usize,
    pub lighting_rows: usize,
    pub dead_letters: u64,
    pub log_records: u64,
    pub queries_checked: usize,
    pub queries_matching: usize,
    pub elapsed_ms: u64,
    pub passed: bool,
}

/// Values equal within 1e-9 relative, labels and timestamps exactly.
pub fn series_match(a: &SeriesResult, b: &SeriesResult) -> bool {
    a.use_case == b.use_case
        && a.unit == b.unit
        && a.groups.len() == b.groups.len()
        && a.groups.iter().zip(&b.groups).all(|(x, y)| {
            x.label == y.label
                && x.points.len() == y.points.len()
                && x.points
                    .iter()
                    .zip(&y.points)
                    .all(|(p, q)| p.ts == q.ts && close(p.value, q.value))
        })
}

pub fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn verify_window(scenario: &ScenarioFile, minutes: u32) -> (DateTime<Utc>, DateTime<Utc>) {
    let configured = scenario
        .traffic
        .as_ref()
        .and_then(|t| t.start_ts)
        .or_else(|| scenario.lighting.as_ref().and_then(|l| l.start_ts));
    let span = ChronoDuration::minutes(i64::from(minutes));
    let from = configured.unwrap_or_else(|| {
        Utc::now().duration_trunc(ChronoDuration::minutes(1)).expect("in range") - span
    });
    (from, from + span)
}

fn dates_of(from: DateTime<Utc>, to: DateTime<Utc>) -> (NaiveDate, NaiveDate) {
    let last = to - ChronoDuration::seconds(1);
    (from.date_naive(), last.date_naive().max(from.date_naive()))
}

/// Restarts the broker on the same address, retrying while the port is
/// still held.
async fn restart_broker(old: BrokerHandle, config: BrokerConfig) -> Result<BrokerHandle, PipelineError> {
    old.shutdown().await;
    let mut last = None;
    for _ in 0..50 {
        match broker::start(config.clone()).await {
            Ok(h) => return Ok(h),
            Err(e) => last = Some(e),
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    Err(last.expect("at least one attempt").into())
}

/// Headless end-to-end check: publish a backfill through an in-process
/// broker and bridge, drain into a store, and compare row counts and a
/// fixed query set against a rescan of the generated data.
pub async fn verify(scenario: &ScenarioFile, opts: VerifyOptions) -> Result<VerifyReport, PipelineError> {
    scenario
        .require_simulator()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    if opts.minutes == 0 {
        return Err(PipelineError::Config("--minutes must be at least 1".into()));
    }
    let started = Instant::now();
    let (from, to) = verify_window(scenario, opts.minutes);
    let sims = SimConfig::from_scenario(scenario);
    let mut messages: Vec<Message> = sims.iter().flat_map(|s| s.messages(from, to)).collect();
    messages.sort_by_key(|m| m.ts);

    let temp;
    let data_dir = match &opts.data_dir {
        Some(d) => d.clone(),
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_owned()
        }
    };
    let mut broker_config = BrokerConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        hold_unrouted: Some(HOLD_UNROUTED),
        ..BrokerConfig::default()
    };
    let mut broker = broker::start(broker_config.clone()).await?;
    broker_config.bind = broker.local_addr();
    let addr = broker.local_addr().to_string();

    let log = Arc::new(EventLog::open(&data_dir, log_config(scenario.log.partitions))?);
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut bridge_config = BridgeConfig::new(addr.clone());
    bridge_config.client.backoff_initial = Duration::from_millis(100);
    let bridge = tokio::spawn(Bridge::new(Arc::clone(&log), bridge_config)?.run(stop_rx));

    let mut client_opts = ClientOptions::new(addr, "testbed-verify");
    client_opts.backoff_initial = Duration::from_millis(100);
    let (client, _incoming) = MqttClient::connect(client_opts).await?;
    let chunks = opts.broker_restarts as usize + 1;
    let chunk_len = messages.len().div_ceil(chunks).max(1);
    let mut published = 0u64;
    for (i, chunk) in messages.chunks(chunk_len).enumerate() {
        for m in chunk {
            client.publish(m.topic.clone(), m.payload.clone(), QoS::AtLeastOnce).await?;
            published += 1;
        }
        if i + 1 < chunks {
            log::info!("restarting broker after {published} publishes");
            let generation = client.generation();
            broker = restart_broker(broker, broker_config.clone()).await?;
            // Let the next chunk go out on a live connection.
            let deadline = Instant::now() + Duration::from_secs(10);
            while client.generation() == generation && Instant::now() < deadline {
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        }
    }
    let mut restarts_done = (messages.len().div_ceil(chunk_len)).saturating_sub(1) as u32;
    while restarts_done < opts.broker_restarts {
        broker = restart_broker(broker, broker_config.clone()).await?;
        restarts_done += 1;
    }
    tokio::time::timeout(Duration::from_secs(120), client.flush())
        .await
        .map_err(|_| PipelineError::Failed("publishes were not acknowledged within 120 s".into()))??;
    client.disconnect().await;
    let _ = stop_tx.send(true);
    if let Err(e) = bridge.await.map_err(|e| PipelineError::Failed(e.to_string()))? {
        log::warn!("bridge ended with {e}");
    }
    broker.shutdown().await;

    let store = Store::new(scenario.power_w());
    consume_available(&log, &store, Some(STORE_GROUP))?;
    if opts.data_dir.is_some() {
        write_snapshot(&store, &snapshot_path(&data_dir))?;
    }

    let mut readings = Vec::new();
    let mut events = Vec::new();
    for m in &messages {
        if let Ok(r) = decode_traffic(&m.payload) {
            readings.push(r);
        } else if let Ok(e) = decode_lighting(&m.payload) {
            events.push(e);
        }
    }
    let expected_lighting_rows = events
        .iter()
        .map(|e| (e.sensor_id.clone(), e.ts, e.event))
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let (date_from, date_to) = dates_of(from, to);
    let mut checks: Vec<bool> = Vec::new();
    if let Some(t) = &scenario.traffic {
        let mut spec = QuerySpec::new(UseCase::Traffic, date_from, date_to);
        spec.sensors = t.sensors.iter().map(|s| s.id.clone()).collect();
        spec.group_by = GroupBy::Sensor;
        spec.bucket = Bucket::Minute;
        checks.push(series_match(&store.query_traffic(&spec)?, &oracle::query_traffic(&readings, &spec)?));
    }
    if let Some(l) = &scenario.lighting {
        let with_events: Vec<String> = l
            .locations
            .iter()
            .map(|s| s.id.clone())
            .filter(|id| events.iter().any(|e| &e.sensor_id == id))
            .collect();
        if !with_events.is_empty() {
            let mut spec = QuerySpec::new(UseCase::Lighting, date_from, date_to);
            spec.sensors = with_events.clone();
            spec.group_by = GroupBy::Sensor;
            checks.push(series_match(
                &store.query_energy(&spec)?,
                &oracle::query_energy(&events, l.power_w, &spec)?,
            ));
            for id in &with_events {
                let got = store.query_energy_total(id, date_from, 0, 23)?;
                let want = oracle::query_energy_total(&events, l.power_w, id, date_from, 0, 23)?;
                checks.push(got.on_seconds == want.on_seconds && close(got.energy_wh, want.energy_wh));
            }
        }
    }

    let expected_traffic_rows = readings.len();
    let dead_letters = store.dead_letters() + STREAMS.iter().map(|s| stream_records(&log, &dlq_stream(s))).sum::<u64>();
    let elapsed_ms = started.elapsed().as_millis() as u64;
    let queries_matching = checks.iter().filter(|c| **c).count();
    let report = VerifyReport {
        from,
        to,
        published,
        broker_restarts: opts.broker_restarts,
        expected_traffic_rows,
        traffic_rows: store.traffic_row_count(),
        expected_lighting_rows,
        lighting_rows: store.lighting_row_count(),
        dead_letters,
        log_records: STREAMS.iter().map(|s| stream_records(&log, s)).sum(),
        queries_checked: checks.len(),
        queries_matching,
        elapsed_ms,
        passed: store.traffic_row_count() == expected_traffic_rows
            && store.lighting_row_count() == expected_lighting_rows
            && dead_letters == 0
            && queries_matching == checks.len(),
    };
    Ok(report)
}

/// Parses a backfill bound: an RFC 3339 timestamp or a date (midnight UTC).
pub fn parse_bound(s: &str) -> Result<DateTime<Utc>, PipelineError> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    s.parse::<NaiveDate>()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
        .map_err(|_| PipelineError::Config(format!("`{s}` is neither an RFC 3339 timestamp nor a date")))
}

/// Labels keyed by use case from an optional scenario.
pub fn labels_of(scenario: Option<&ScenarioFile>) -> BTreeMap<UseCase, BTreeMap<String, String>> {
    scenario.map(ScenarioFile::labels).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds() {
        assert_eq!(parse_bound("2017-03-01").unwrap().to_rfc3339(), "2017-03-01T00:00:00+00:00");
        assert_eq!(
            parse_bound("2017-03-01T08:00:00Z").unwrap().to_rfc3339(),
            "2017-03-01T08:00:00+00:00"
        );
        assert_eq!(parse_bound("yesterday").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn closeness() {
        assert!(close(1.0, 1.0 + 1e-12));
        assert!(!close(1.0, 1.0001));
        assert!(close(0.0, 0.0));
    }
}
