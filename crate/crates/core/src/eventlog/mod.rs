//! Partitioned append-only log with consumer-group offsets.
//!
//! Each stream is a directory of partitions, each partition a directory of
//! segment files named by their first offset. Appends are fsync'd before
//! they become visible to readers.

pub mod bridge;
mod groups;
mod partition;
pub mod segment;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::{Mutex, RwLock};

pub use groups::GroupOffsets;
pub use partition::PartitionRecovery;

use groups::GroupStore;
use partition::Partition;

pub const DEFAULT_PARTITIONS: u32 = 4;
pub const DEFAULT_SEGMENT_MAX_BYTES: u64 = 64 * 1024 * 1024;

const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Panics if `partition_count` is zero.
pub fn partition_for_key(key: &[u8], partition_count: u32) -> u32 {
    assert!(partition_count >= 1, "partition_count must be at least 1");
    (fnv1a64(key) % u64::from(partition_count)) as u32
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("unknown stream {0:?}")]
    UnknownStream(String),
    #[error("stream {stream:?} has no partition {partition}")]
    BadPartition { stream: String, partition: u32 },
    #[error("offset {offset} is beyond the high-watermark {high_watermark}")]
    OffsetBeyondEnd { offset: u64, high_watermark: u64 },
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("key of {0} bytes exceeds 65535")]
    KeyTooLong(usize),
    #[error("log is open read-only")]
    ReadOnly,
    #[error("log directory is locked by another writer")]
    Locked,
    #[error("storage full")]
    StorageFull,
    #[error("corrupt log: {0}")]
    Corrupt(String),
    #[error("i/o failure: {0}")]
    IoFailure(io::Error),
}

impl From<io::Error> for LogError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            LogError::StorageFull
        } else {
            LogError::IoFailure(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    /// fsync every batch before acknowledging it.
    #[default]
    Fsync,
    /// Leave flushing to the OS. Only for benchmarks and tests that do not
    /// care about crashes.
    OsBuffer,
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    pub default_partitions: u32,
    pub segment_max_bytes: u64,
    pub sync: SyncMode,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            default_partitions: DEFAULT_PARTITIONS,
            segment_max_bytes: DEFAULT_SEGMENT_MAX_BYTES,
            sync: SyncMode::Fsync,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamConfig {
    pub name: String,
    pub partition_count: u32,
    pub segment_max_bytes: u64,
}

impl StreamConfig {
    pub fn new(name: impl Into<String>, partition_count: u32) -> Self {
        StreamConfig {
            name: name.into(),
            partition_count,
            segment_max_bytes: DEFAULT_SEGMENT_MAX_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub stream: String,
    pub partition: u32,
    pub offset: u64,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub ingest_ts: DateTime<Utc>,
}

/// Per stream, per partition recovery results gathered at open.
#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub partitions: BTreeMap<String, Vec<PartitionRecovery>>,
}

impl RecoveryReport {
    pub fn total_records(&self) -> u64 {
        self.partitions.values().flatten().map(|p| p.records).sum()
    }

    pub fn truncated_bytes(&self) -> u64 {
        self.partitions.values().flatten().map(|p| p.truncated_bytes).sum()
    }

    /// Partitions whose tail had to be cut. Each holds at most one torn
    /// record, since appends are sequential.
    pub fn torn_tails(&self) -> usize {
        self.partitions
            .values()
            .flatten()
            .filter(|p| p.truncated_bytes > 0)
            .count()
    }
}

#[derive(Debug)]
struct Stream {
    partitions: Vec<Partition>,
}

#[derive(Debug)]
pub struct EventLog {
    dir: PathBuf,
    config: LogConfig,
    // Held for its advisory lock; `None` for followers.
    _lock: Option<fs::File>,
    streams: RwLock<Streams>,
    groups: Mutex<GroupStore>,
    recovery: RecoveryReport,
}

fn valid_stream_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && !name.contains(['/', '\\', '\0'])
}

fn partition_dirs(stream_dir: &Path) -> io::Result<Vec<u32>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(stream_dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        if let Some(id) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

const LOCK_FILE: &str = ".lock";
const CREATING_SUFFIX: &str = ".creating";

type Streams = BTreeMap<String, Arc<Stream>>;

/// Opens every stream directory under `dir` not already in `skip`.
fn scan_streams(
    dir: &Path,
    config: &LogConfig,
    follower: bool,
    skip: &Streams,
) -> Result<(Streams, RecoveryReport), LogError> {
    let mut streams = BTreeMap::new();
    let mut recovery = RecoveryReport::default();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
            continue;
        };
        if name.starts_with('.') || skip.contains_key(&name) {
            continue;
        }
        let ids = partition_dirs(&entry.path())?;
        if ids.is_empty() {
            continue;
        }
        if ids.iter().enumerate().any(|(i, id)| *id as usize != i) {
            return Err(LogError::Corrupt(format!(
                "stream {name}: partition directories {ids:?} are not 0..n"
            )));
        }
        let mut parts = Vec::with_capacity(ids.len());
        let mut rec = Vec::with_capacity(ids.len());
        for id in ids {
            let (p, r) = Partition::open(
                entry.path().join(id.to_string()),
                config.segment_max_bytes,
                config.sync,
                follower,
            )?;
            parts.push(p);
            rec.push(r);
        }
        recovery.partitions.insert(name.clone(), rec);
        streams.insert(name, Arc::new(Stream { partitions: parts }));
    }
    Ok((streams, recovery))
}

fn now_ms() -> i64 {
    Utc::now().timestamp_millis()
}

impl EventLog {
    /// Opens the log rooted at `dir` for writing, creating it if needed and
    /// recovering every existing stream. Only one writer may hold a
    /// directory at a time.
    pub fn open(dir: impl Into<PathBuf>, config: LogConfig) -> Result<EventLog, LogError> {
        let dir = dir.into();
        if config.default_partitions == 0 {
            return Err(LogError::InvalidConfig("partitions must be at least 1".into()));
        }
        fs::create_dir_all(&dir)?;
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(LogError::Locked),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            if name.to_str().is_some_and(|n| n.starts_with('.') && n.ends_with(CREATING_SUFFIX)) {
                fs::remove_dir_all(entry.path())?;
            }
        }
        let (streams, recovery) = scan_streams(&dir, &config, false, &BTreeMap::new())?;
        let groups = GroupStore::load(&dir)?;
        Ok(EventLog {
            dir,
            config,
            _lock: Some(lock),
            streams: RwLock::new(streams),
            groups: Mutex::new(groups),
            recovery,
        })
    }

    /// Opens an existing log without writing to segments. Call
    /// [`EventLog::refresh`] to observe appends made by the writer process.
    /// Consumer-group commits are still allowed.
    pub fn open_follower(dir: impl Into<PathBuf>, config: LogConfig) -> Result<EventLog, LogError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(LogError::IoFailure(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{} is not a directory", dir.display()),
            )));
        }
        let (streams, recovery) = scan_streams(&dir, &config, true, &BTreeMap::new())?;
        let groups = GroupStore::load(&dir)?;
        Ok(EventLog {
            dir,
            config,
            _lock: None,
            streams: RwLock::new(streams),
            groups: Mutex::new(groups),
            recovery,
        })
    }

    pub fn is_follower(&self) -> bool {
        self._lock.is_none()
    }

    /// Follower only: discovers new streams and records. Returns true if
    /// anything new was found.
    pub fn refresh(&self) -> Result<bool, LogError> {
        if !self.is_follower() {
            return Ok(false);
        }
        let mut changed = false;
        let known = self.streams.read().clone();
        let (fresh, _) = scan_streams(&self.dir, &self.config, true, &known)?;
        if !fresh.is_empty() {
            changed = true;
            self.streams.write().extend(fresh);
        }
        for stream in known.values() {
            for p in &stream.partitions {
                let before = p.high_watermark();
                if p.refresh()? != before {
                    changed = true;
                }
            }
        }
        Ok(changed)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    /// Creates a stream, or returns Ok if one with the same partition count
    /// already exists.
    pub fn create_stream(&self, config: &StreamConfig) -> Result<(), LogError> {
        if !valid_stream_name(&config.name) {
            return Err(LogError::InvalidConfig(format!("bad stream name {:?}", config.name)));
        }
        if config.partition_count == 0 {
            return Err(LogError::InvalidConfig("partition_count must be at least 1".into()));
        }
        let mut streams = self.streams.write();
        if let Some(existing) = streams.get(&config.name) {
            let n = existing.partitions.len() as u32;
            if n != config.partition_count {
                return Err(LogError::InvalidConfig(format!(
                    "stream {} already has {n} partitions",
                    config.name
                )));
            }
            return Ok(());
        }
        if self.is_follower() {
            return Err(LogError::ReadOnly);
        }
        // Built under a hidden name and renamed so a follower never sees a
        // stream with only some of its partitions.
        let staging = self.dir.join(format!(".{}{CREATING_SUFFIX}", config.name));
        let stream_dir = self.dir.join(&config.name);
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        for id in 0..config.partition_count {
            let pdir = staging.join(id.to_string());
            fs::create_dir_all(&pdir)?;
            fs::File::create(pdir.join("0.seg"))?.sync_all()?;
            partition::sync_dir(&pdir)?;
        }
        partition::sync_dir(&staging)?;
        fs::rename(&staging, &stream_dir)?;
        partition::sync_dir(&self.dir)?;
        let mut parts = Vec::with_capacity(config.partition_count as usize);
        for id in 0..config.partition_count {
            let (p, _) = Partition::open(
                stream_dir.join(id.to_string()),
                config.segment_max_bytes,
                self.config.sync,
                false,
            )?;
            parts.push(p);
        }
        streams.insert(config.name.clone(), Arc::new(Stream { partitions: parts }));
        Ok(())
    }

    /// Creates `name` with the default partition count if it does not exist.
    pub fn ensure_stream(&self, name: &str) -> Result<(), LogError> {
        if self.streams.read().contains_key(name) {
            return Ok(());
        }
        let config = StreamConfig {
            name: name.to_owned(),
            partition_count: self.config.default_partitions,
            segment_max_bytes: self.config.segment_max_bytes,
        };
        match self.create_stream(&config) {
            Err(LogError::InvalidConfig(_)) if self.streams.read().contains_key(name) => Ok(()),
            other => other,
        }
    }

    pub fn streams(&self) -> Vec<String> {
        self.streams.read().keys().cloned().collect()
    }

    fn stream(&self, name: &str) -> Result<Arc<Stream>, LogError> {
        self.streams
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| LogError::UnknownStream(name.to_owned()))
    }

    fn partition<'a>(
        &self,
        stream: &'a Stream,
        name: &str,
        partition: u32,
    ) -> Result<&'a Partition, LogError> {
        stream
            .partitions
            .get(partition as usize)
            .ok_or_else(|| LogError::BadPartition {
                stream: name.to_owned(),
                partition,
            })
    }

    pub fn partition_count(&self, stream: &str) -> Result<u32, LogError> {
        Ok(self.stream(stream)?.partitions.len() as u32)
    }

    pub fn append(&self, stream: &str, key: &[u8], value: &[u8]) -> Result<(u32, u64), LogError> {
        let s = self.stream(stream)?;
        let p = partition_for_key(key, s.partitions.len() as u32);
        let offset = s.partitions[p as usize].append_batch(&[(key, value)], now_ms())?;
        Ok((p, offset))
    }

    /// Appends many records with one fsync per touched partition. Returns
    /// (partition, offset) for each input in input order. Records sharing a
    /// key keep their relative order.
    pub fn append_batch(
        &self,
        stream: &str,
        records: &[(&[u8], &[u8])],
    ) -> Result<Vec<(u32, u64)>, LogError> {
        let s = self.stream(stream)?;
        let n = s.partitions.len() as u32;
        let mut by_partition: Vec<Vec<usize>> = vec![Vec::new(); n as usize];
        for (i, (key, _)) in records.iter().enumerate() {
            by_partition[partition_for_key(key, n) as usize].push(i);
        }
        let ts = now_ms();
        let mut out = vec![(0, 0); records.len()];
        for (p, idxs) in by_partition.iter().enumerate() {
            if idxs.is_empty() {
                continue;
            }
            let batch: Vec<(&[u8], &[u8])> = idxs.iter().map(|&i| records[i]).collect();
            let first = s.partitions[p].append_batch(&batch, ts)?;
            for (k, &i) in idxs.iter().enumerate() {
                out[i] = (p as u32, first + k as u64);
            }
        }
        Ok(out)
    }

    pub fn read(
        &self,
        stream: &str,
        partition: u32,
        from_offset: u64,
        max_records: usize,
    ) -> Result<Vec<LogRecord>, LogError> {
        let s = self.stream(stream)?;
        let p = self.partition(&s, stream, partition)?;
        Ok(p
            .read(from_offset, max_records)?
            .into_iter()
            .map(|r| LogRecord {
                stream: stream.to_owned(),
                partition,
                offset: r.offset,
                key: r.key,
                value: r.value,
                ingest_ts: Utc
                    .timestamp_millis_opt(r.ingest_ts_ms)
                    .single()
                    .unwrap_or(DateTime::UNIX_EPOCH),
            })
            .collect())
    }

    pub fn high_watermark(&self, stream: &str, partition: u32) -> Result<u64, LogError> {
        let s = self.stream(stream)?;
        Ok(self.partition(&s, stream, partition)?.high_watermark())
    }

    pub fn commit(
        &self,
        group: &str,
        stream: &str,
        partition: u32,
        next_offset: u64,
    ) -> Result<(), LogError> {
        self.commit_many(group, stream, &[(partition, next_offset)])
    }

    /// Commits several partitions of one stream in a single durable write.
    pub fn commit_many(
        &self,
        group: &str,
        stream: &str,
        entries: &[(u32, u64)],
    ) -> Result<(), LogError> {
        let s = self.stream(stream)?;
        for &(partition, offset) in entries {
            let hw = self.partition(&s, stream, partition)?.high_watermark();
            if offset > hw {
                return Err(LogError::OffsetBeyondEnd {
                    offset,
                    high_watermark: hw,
                });
            }
        }
        self.groups.lock().set_many(group, stream, entries)?;
        Ok(())
    }

    pub fn committed_offset(&self, group: &str, stream: &str, partition: u32) -> Result<u64, LogError> {
        let s = self.stream(stream)?;
        self.partition(&s, stream, partition)?;
        Ok(self.groups.lock().get(group, stream, partition))
    }

    pub fn reset(&self, group: &str, stream: &str) -> Result<(), LogError> {
        let n = self.partition_count(stream)?;
        self.groups.lock().reset(group, stream, n)?;
        Ok(())
    }

    pub fn group_offsets(&self) -> GroupOffsets {
        self.groups.lock().all().clone()
    }

    pub fn segment_count(&self, stream: &str, partition: u32) -> Result<usize, LogError> {
        let s = self.stream(stream)?;
        Ok(self.partition(&s, stream, partition)?.segment_count())
    }
}
