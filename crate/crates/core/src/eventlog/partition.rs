use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::segment::{self, parse_frame};
use super::{LogError, SyncMode};

#[derive(Debug)]
struct SegmentIndex {
    base: u64,
    file: Arc<File>,
    positions: Vec<u64>,
    len: u64,
}

#[derive(Debug)]
struct Writer {
    file: Arc<File>,
    size: u64,
    next_offset: u64,
}

/// What recovery found in one partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionRecovery {
    pub records: u64,
    pub truncated_bytes: u64,
}

/// A raw record read back from a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub offset: u64,
    pub key: Vec<u8>,
    pub ingest_ts_ms: i64,
    pub value: Vec<u8>,
}

#[derive(Debug)]
pub struct Partition {
    dir: PathBuf,
    writer: Mutex<Writer>,
    index: RwLock<Vec<SegmentIndex>>,
    high_watermark: AtomicU64,
    segment_max_bytes: u64,
    sync: SyncMode,
    follower: bool,
}

fn segment_path(dir: &Path, base: u64) -> PathBuf {
    dir.join(format!("{base}.seg"))
}

fn open_rw(path: &Path, create: bool) -> io::Result<File> {
    OpenOptions::new()
        .read(true)
        .write(true)
        .create(create)
        .truncate(false)
        .open(path)
}

pub(crate) fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl Partition {
    /// Opens (or creates) the partition in `dir`, scanning every segment.
    /// A torn or corrupt tail in the newest segment is truncated; damage in
    /// an older segment is an error. A follower never modifies files and
    /// treats an incomplete tail as not yet written.
    pub fn open(
        dir: PathBuf,
        segment_max_bytes: u64,
        sync: SyncMode,
        follower: bool,
    ) -> Result<(Partition, PartitionRecovery), LogError> {
        if !follower {
            fs::create_dir_all(&dir)?;
        }
        let mut bases = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".seg") {
                let base = stem
                    .parse::<u64>()
                    .map_err(|_| LogError::Corrupt(format!("bad segment name {name}")))?;
                bases.push(base);
            }
        }
        bases.sort_unstable();
        if bases.is_empty() {
            if follower {
                return Err(LogError::Corrupt(format!("{}: no segments", dir.display())));
            }
            open_rw(&segment_path(&dir, 0), true)?;
            sync_dir(&dir)?;
            bases.push(0);
        }

        let mut recovery = PartitionRecovery::default();
        let mut segments = Vec::with_capacity(bases.len());
        let mut expected = bases[0];
        if expected != 0 {
            return Err(LogError::Corrupt(format!(
                "{}: first segment starts at {expected}",
                dir.display()
            )));
        }
        let last = bases.len() - 1;
        for (i, base) in bases.iter().copied().enumerate() {
            let path = segment_path(&dir, base);
            if base != expected {
                return Err(LogError::Corrupt(format!(
                    "{}: expected offset {expected}",
                    path.display()
                )));
            }
            let file = if follower {
                File::open(&path)?
            } else {
                open_rw(&path, false)?
            };
            let scan = segment::scan(&file)?;
            if scan.valid_len < scan.file_len && !(follower && i == last) {
                if i != last {
                    return Err(LogError::Corrupt(format!(
                        "{}: damaged record at byte {}",
                        path.display(),
                        scan.valid_len
                    )));
                }
                log::warn!(
                    "{}: truncating {} torn bytes at {}",
                    path.display(),
                    scan.file_len - scan.valid_len,
                    scan.valid_len
                );
                file.set_len(scan.valid_len)?;
                file.sync_all()?;
                recovery.truncated_bytes = scan.file_len - scan.valid_len;
            }
            expected = base + scan.positions.len() as u64;
            segments.push(SegmentIndex {
                base,
                file: Arc::new(file),
                positions: scan.positions,
                len: scan.valid_len,
            });
        }
        recovery.records = expected;
        let tail = segments.last().expect("at least one segment");
        let writer = Writer {
            file: Arc::clone(&tail.file),
            size: tail.len,
            next_offset: expected,
        };
        Ok((
            Partition {
                dir,
                writer: Mutex::new(writer),
                index: RwLock::new(segments),
                high_watermark: AtomicU64::new(expected),
                segment_max_bytes,
                sync,
                follower,
            },
            recovery,
        ))
    }

    pub fn high_watermark(&self) -> u64 {
        self.high_watermark.load(Ordering::Acquire)
    }

    /// Appends records in order and makes them durable before returning the
    /// offset of the first one.
    pub fn append_batch(&self, records: &[(&[u8], &[u8])], ingest_ts_ms: i64) -> Result<u64, LogError> {
        if self.follower {
            return Err(LogError::ReadOnly);
        }
        let mut w = self.writer.lock();
        let first = w.next_offset;
        if records.is_empty() {
            return Ok(first);
        }
        if w.size >= self.segment_max_bytes {
            let path = segment_path(&self.dir, w.next_offset);
            let file = Arc::new(open_rw(&path, true)?);
            sync_dir(&self.dir)?;
            self.index.write().push(SegmentIndex {
                base: w.next_offset,
                file: Arc::clone(&file),
                positions: Vec::new(),
                len: 0,
            });
            w.file = file;
            w.size = 0;
        }
        let capacity = records.iter().map(|(k, v)| segment::frame_len(k, v)).sum();
        let mut buf = Vec::with_capacity(capacity);
        let mut positions = Vec::with_capacity(records.len());
        for (key, value) in records {
            if key.len() > usize::from(u16::MAX) {
                return Err(LogError::KeyTooLong(key.len()));
            }
            positions.push(w.size + buf.len() as u64);
            segment::put_frame(&mut buf, key, ingest_ts_ms, value);
        }
        w.file.write_all_at(&buf, w.size)?;
        match self.sync {
            SyncMode::Fsync => w.file.sync_data()?,
            SyncMode::OsBuffer => {}
        }
        w.size += buf.len() as u64;
        w.next_offset += records.len() as u64;
        {
            let mut index = self.index.write();
            let seg = index.last_mut().expect("at least one segment");
            seg.positions.extend(positions);
            seg.len = w.size;
        }
        self.high_watermark.store(w.next_offset, Ordering::Release);
        Ok(first)
    }

    /// Records `[from, min(from + max, high_watermark))` in offset order.
    /// Only the index lookup holds a lock; file reads are positional.
    pub fn read(&self, from: u64, max: usize) -> Result<Vec<RawRecord>, LogError> {
        let hw = self.high_watermark();
        if from >= hw || max == 0 {
            return Ok(Vec::new());
        }
        let end = hw.min(from.saturating_add(max as u64));
        let mut ranges = Vec::new();
        {
            let index = self.index.read();
            let mut seg_idx = match index.binary_search_by_key(&from, |s| s.base) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            let mut offset = from;
            while offset < end {
                let seg = &index[seg_idx];
                let seg_end = seg.base + seg.positions.len() as u64;
                let stop = end.min(seg_end);
                if offset < stop {
                    let lo = (offset - seg.base) as usize;
                    let hi = (stop - seg.base) as usize;
                    let start_pos = seg.positions[lo];
                    let end_pos = seg.positions.get(hi).copied().unwrap_or(seg.len);
                    ranges.push((Arc::clone(&seg.file), offset, start_pos, end_pos, hi - lo));
                    offset = stop;
                }
                seg_idx += 1;
            }
        }
        let mut out = Vec::with_capacity((end - from) as usize);
        for (file, first_offset, start, stop, count) in ranges {
            let mut data = vec![0u8; (stop - start) as usize];
            file.read_exact_at(&mut data, start)?;
            let mut pos = 0;
            for i in 0..count {
                let (body, n) = parse_frame(&data[pos..]).map_err(|e| {
                    LogError::Corrupt(format!(
                        "{}: offset {}: {e:?}",
                        self.dir.display(),
                        first_offset + i as u64
                    ))
                })?;
                out.push(RawRecord {
                    offset: first_offset + i as u64,
                    key: body.key.to_vec(),
                    ingest_ts_ms: body.ingest_ts_ms,
                    value: body.value.to_vec(),
                });
                pos += n;
            }
        }
        Ok(out)
    }

    /// Follower only: picks up records appended by the writing process
    /// since the last refresh. Returns the new high-watermark.
    pub fn refresh(&self) -> Result<u64, LogError> {
        let mut w = self.writer.lock();
        loop {
            self.extend_tail(&mut w)?;
            // An empty tail cannot have been rolled past yet.
            if w.size == 0 {
                break;
            }
            let next = segment_path(&self.dir, w.next_offset);
            let file = match File::open(&next) {
                Ok(f) => Arc::new(f),
                Err(e) if e.kind() == io::ErrorKind::NotFound => break,
                Err(e) => return Err(e.into()),
            };
            // The writer only rolls after finishing the previous segment.
            self.extend_tail(&mut w)?;
            self.index.write().push(SegmentIndex {
                base: w.next_offset,
                file: Arc::clone(&file),
                positions: Vec::new(),
                len: 0,
            });
            w.file = file;
            w.size = 0;
        }
        self.high_watermark.store(w.next_offset, Ordering::Release);
        Ok(w.next_offset)
    }

    fn extend_tail(&self, w: &mut Writer) -> Result<(), LogError> {
        let file_len = w.file.metadata()?.len();
        if file_len <= w.size {
            return Ok(());
        }
        let mut data = vec![0u8; (file_len - w.size) as usize];
        w.file.read_exact_at(&mut data, w.size)?;
        let mut positions = Vec::new();
        let mut pos = 0usize;
        while let Ok((_, n)) = parse_frame(&data[pos..]) {
            positions.push(w.size + pos as u64);
            pos += n;
        }
        if positions.is_empty() {
            return Ok(());
        }
        w.size += pos as u64;
        w.next_offset += positions.len() as u64;
        let mut index = self.index.write();
        let seg = index.last_mut().expect("at least one segment");
        seg.positions.extend(positions);
        seg.len = w.size;
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.index.read().len()
    }
}
