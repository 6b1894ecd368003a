use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::partition::sync_dir;

/// group → stream → partition → next offset to read.
pub type GroupOffsets = BTreeMap<String, BTreeMap<String, BTreeMap<u32, u64>>>;

fn read_offsets(path: &Path) -> io::Result<GroupOffsets> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(GroupOffsets::new()),
        Err(e) => Err(e),
    }
}

/// Consumer-group offsets persisted as `groups.json`, rewritten through a
/// temporary file and a rename so a crash leaves either the old or the new
/// contents.
#[derive(Debug)]
pub struct GroupStore {
    path: PathBuf,
    offsets: GroupOffsets,
}

impl GroupStore {
    pub fn load(dir: &Path) -> io::Result<Self> {
        let path = dir.join("groups.json");
        let offsets = read_offsets(&path)?;
        Ok(GroupStore { path, offsets })
    }

    pub fn get(&self, group: &str, stream: &str, partition: u32) -> u64 {
        self.offsets
            .get(group)
            .and_then(|g| g.get(stream))
            .and_then(|s| s.get(&partition))
            .copied()
            .unwrap_or(0)
    }

    /// Re-reads the file first so that groups committed by another process
    /// sharing the directory are preserved.
    pub fn set_many(&mut self, group: &str, stream: &str, entries: &[(u32, u64)]) -> io::Result<()> {
        let mut next = read_offsets(&self.path)?;
        let s = next
            .entry(group.to_owned())
            .or_default()
            .entry(stream.to_owned())
            .or_default();
        for (p, o) in entries {
            s.insert(*p, *o);
        }
        self.persist(&next)?;
        self.offsets = next;
        Ok(())
    }

    pub fn reset(&mut self, group: &str, stream: &str, partitions: u32) -> io::Result<()> {
        let entries: Vec<_> = (0..partitions).map(|p| (p, 0)).collect();
        self.set_many(group, stream, &entries)
    }

    pub fn all(&self) -> &GroupOffsets {
        &self.offsets
    }

    fn persist(&self, offsets: &GroupOffsets) -> io::Result<()> {
        let tmp = self.path.with_extension(format!("json.{}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(offsets).expect("offsets serialize"))?;
        f.sync_all()?;
        fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent() {
            sync_dir(dir)?;
        }
        Ok(())
    }
}
