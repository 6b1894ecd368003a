//! Feeding the store from the event log.

use super::{IngestCounts, Store, STREAMS};
use crate::eventlog::{EventLog, LogError};

/// Consumer group under which the store records its progress.
pub const STORE_GROUP: &str = "store";

const READ_CHUNK: usize = 4096;

/// Ingests everything between the store's offsets and the current
/// high-watermarks. When `commit_group` is set, the new offsets of every
/// stream that yielded records are committed for it afterwards.
pub fn consume_available(log: &EventLog, store: &Store, commit_group: Option<&str>) -> Result<IngestCounts, LogError> {
    let mut counts = IngestCounts::default();
    for stream in STREAMS {
        let Ok(partitions) = log.partition_count(stream) else {
            continue;
        };
        let mut committed = Vec::new();
        let mut read_any = false;
        for p in 0..partitions {
            loop {
                let from = store.offset(stream, p);
                let batch = log.read(stream, p, from, READ_CHUNK)?;
                if batch.is_empty() {
                    break;
                }
                read_any = true;
                counts.merge(store.ingest_batch(&batch));
            }
            committed.push((p, store.offset(stream, p)));
        }
        if let (Some(group), true) = (commit_group, read_any) {
            log.commit_many(group, stream, &committed)?;
        }
    }
    Ok(counts)
}

/// Drops all rows, resets the store group and consumes from offset 0.
pub fn rebuild_from_log(log: &EventLog, store: &Store) -> Result<IngestCounts, LogError> {
    store.clear();
    for stream in STREAMS {
        if log.partition_count(stream).is_ok() {
            log.reset(STORE_GROUP, stream)?;
        }
    }
    consume_available(log, store, Some(STORE_GROUP))
}
