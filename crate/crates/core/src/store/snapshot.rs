//! Offset-stamped store snapshots.
//!
//! A snapshot is one JSON document: a version, the next offset per
//! (stream, partition), and every row as its canonical payload with the
//! log position it came from. It is written to a temporary file and
//! renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Data, LightingRow, Store, TrafficRow};
use crate::model::{decode_lighting, decode_traffic, encode_lighting, encode_traffic};

pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "store.snapshot.json";

#[derive(Serialize, Deserialize)]
struct OffsetEntry {
    stream: String,
    partition: u32,
    next: u64,
}

#[derive(Serialize, Deserialize)]
struct RowEntry {
    partition: u32,
    offset: u64,
    payload: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    version: u32,
    offsets: Vec<OffsetEntry>,
    dead_letters: u64,
    traffic: Vec<RowEntry>,
    lighting: Vec<RowEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("snapshot is not valid: {0}")]
    Invalid(String),
    #[error("snapshot version {0} is not supported")]
    Version(u32),
}

fn utf8(bytes: Vec<u8>) -> String {
    String::from_utf8(bytes).expect("payloads are JSON")
}

pub fn write_snapshot(store: &Store, path: &Path) -> Result<(), SnapshotError> {
    let file = {
        let data = store.read_data();
        SnapshotFile {
            version: SNAPSHOT_VERSION,
            offsets: data
                .offsets
                .iter()
                .map(|((stream, partition), next)| OffsetEntry {
                    stream: stream.clone(),
                    partition: *partition,
                    next: *next,
                })
                .collect(),
            dead_letters: data.dead_letters,
            traffic: data
                .traffic
                .values()
                .map(|r| RowEntry {
                    partition: r.partition,
                    offset: r.offset,
                    payload: utf8(encode_traffic(&r.reading)),
                })
                .collect(),
            lighting: data
                .lighting
                .values()
                .map(|r| RowEntry {
                    partition: r.partition,
                    offset: r.offset,
                    payload: utf8(encode_lighting(&r.event)),
                })
                .collect(),
        }
    };
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&serde_json::to_vec(&file).expect("snapshot serializes"))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        fs::File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// Loads a snapshot; `Ok(None)` if the file does not exist.
pub fn load_snapshot(path: &Path, power_w: f64) -> Result<Option<Store>, SnapshotError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let file: SnapshotFile =
        serde_json::from_slice(&bytes).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
    if file.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(file.version));
    }
    let mut data = Data {
        dead_letters: file.dead_letters,
        ..Data::default()
    };
    for o in file.offsets {
        data.offsets.insert((o.stream, o.partition), o.next);
    }
    for r in file.traffic {
        let reading =
            decode_traffic(r.payload.as_bytes()).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
        data.put_traffic(TrafficRow {
            reading,
            partition: r.partition,
            offset: r.offset,
        });
    }
    for r in file.lighting {
        let event =
            decode_lighting(r.payload.as_bytes()).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
        data.put_lighting(LightingRow {
            event,
            partition: r.partition,
            offset: r.offset,
        });
    }
    Ok(Some(Store::from_data(data, power_w)))
}
