use std::collections::BTreeMap;
use std::fs::OpenOptions;

use iot_testbed::eventlog::{partition_for_key, EventLog, LogConfig, StreamConfig, SyncMode};
use proptest::prelude::*;

fn config(segment_max_bytes: u64) -> LogConfig {
    LogConfig {
        default_partitions: 4,
        segment_max_bytes,
        sync: SyncMode::OsBuffer,
    }
}

fn stream(partitions: u32, segment_max_bytes: u64) -> StreamConfig {
    StreamConfig {
        segment_max_bytes,
        ..StreamConfig::new("s", partitions)
    }
}

type Model = BTreeMap<u32, Vec<(Vec<u8>, Vec<u8>)>>;

fn read_all(log: &EventLog, partitions: u32) -> Model {
    let mut out = Model::new();
    for p in 0..partitions {
        let recs = log.read("s", p, 0, usize::MAX).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.offset, i as u64);
        }
        out.insert(p, recs.into_iter().map(|r| (r.key, r.value)).collect());
    }
    out
}

#[test]
fn thousand_appends_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = iot_testbed::simulators::SplitMix64::new(99);
    let mut model = Model::new();
    {
        let log = EventLog::open(dir.path(), config(4096)).unwrap();
        log.create_stream(&stream(4, 4096)).unwrap();
        for i in 0..1000u64 {
            let key = format!("k{}", rng.below(17)).into_bytes();
            let value: Vec<u8> = (0..rng.below(200)).map(|j| (i + j) as u8).collect();
            let (p, off) = log.append("s", &key, &value).unwrap();
            assert_eq!(p, partition_for_key(&key, 4));
            let part = model.entry(p).or_default();
            assert_eq!(off, part.len() as u64);
            part.push((key, value));
        }
        for p in 0..4 {
            model.entry(p).or_default();
        }
        assert_eq!(read_all(&log, 4), model);
        assert!(log.segment_count("s", 0).unwrap() > 1);
    }
    let log = EventLog::open(dir.path(), config(4096)).unwrap();
    assert_eq!(log.recovery_report().total_records(), 1000);
    assert_eq!(log.recovery_report().torn_tails(), 0);
    assert_eq!(read_all(&log, 4), model);
}

#[derive(Debug, Clone)]
enum Op {
    Append(u8, Vec<u8>),
    Batch(Vec<(u8, Vec<u8>)>),
    Read { partition: u32, from: u64, max: usize },
    Commit { partition: u32, offset: u64 },
    Reopen,
    FollowerCheck,
}

fn op() -> impl Strategy<Value = Op> {
    let value = prop::collection::vec(any::<u8>(), 0..64);
    prop_oneof![
        6 => (0u8..8, value.clone()).prop_map(|(k, v)| Op::Append(k, v)),
        2 => prop::collection::vec((0u8..8, value), 0..6).prop_map(Op::Batch),
        4 => (0u32..3, 0u64..40, 0usize..10).prop_map(|(partition, from, max)| Op::Read { partition, from, max }),
        1 => (0u32..3, 0u64..40).prop_map(|(partition, offset)| Op::Commit { partition, offset }),
        1 => Just(Op::Reopen),
        1 => Just(Op::FollowerCheck),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Interleaved operations agree with a per-partition vector model,
    /// across segment rolls, reopens and follower refreshes.
    #[test]
    fn matches_model(ops in prop::collection::vec(op(), 1..80)) {
        let dir = tempfile::tempdir().unwrap();
        let seg = 256;
        let mut log = EventLog::open(dir.path(), config(seg)).unwrap();
        log.create_stream(&stream(3, seg)).unwrap();
        let follower = EventLog::open_follower(dir.path(), config(seg)).unwrap();
        let mut model: Model = (0..3).map(|p| (p, Vec::new())).collect();
        let mut commits: BTreeMap<u32, u64> = BTreeMap::new();
        for op in ops {
            match op {
                Op::Append(k, v) => {
                    let key = vec![b'k', k];
                    let (p, off) = log.append("s", &key, &v).unwrap();
                    let part = model.get_mut(&p).unwrap();
                    prop_assert_eq!(off, part.len() as u64);
                    part.push((key, v));
                }
                Op::Batch(items) => {
                    let keys: Vec<Vec<u8>> = items.iter().map(|(k, _)| vec![b'k', *k]).collect();
                    let recs: Vec<(&[u8], &[u8])> =
                        keys.iter().zip(&items).map(|(k, (_, v))| (k.as_slice(), v.as_slice())).collect();
                    let placed = log.append_batch("s", &recs).unwrap();
                    for ((p, off), (k, v)) in placed.into_iter().zip(recs) {
                        let part = model.get_mut(&p).unwrap();
                        prop_assert_eq!(off, part.len() as u64);
                        part.push((k.to_vec(), v.to_vec()));
                    }
                }
                Op::Read { partition, from, max } => {
                    let got: Vec<_> = log
                        .read("s", partition, from, max)
                        .unwrap()
                        .into_iter()
                        .map(|r| (r.key, r.value))
                        .collect();
                    let part = &model[&partition];
                    let lo = (from as usize).min(part.len());
                    let hi = (lo + max).min(part.len());
                    prop_assert_eq!(got, part[lo..hi].to_vec());
                }
                Op::Commit { partition, offset } => {
                    let res = log.commit("g", "s", partition, offset);
                    if offset <= model[&partition].len() as u64 {
                        res.unwrap();
                        commits.insert(partition, offset);
                    } else {
                        prop_assert!(res.is_err());
                    }
                }
                Op::Reopen => {
                    drop(log);
                    log = EventLog::open(dir.path(), config(seg)).unwrap();
                }
                Op::FollowerCheck => {
                    follower.refresh().unwrap();
                    prop_assert_eq!(read_all(&follower, 3), model.clone());
                }
            }
            for p in 0..3 {
                prop_assert_eq!(log.high_watermark("s", p).unwrap(), model[&p].len() as u64);
                prop_assert_eq!(log.committed_offset("g", "s", p).unwrap(), commits.get(&p).copied().unwrap_or(0));
            }
        }
        drop(log);
        let log = EventLog::open(dir.path(), config(seg)).unwrap();
        prop_assert_eq!(read_all(&log, 3), model);
    }

    /// Cutting the newest segment anywhere loses at most the record that
    /// straddles the cut; everything before it reads back intact.
    #[test]
    fn torn_tail_recovers_prefix(
        values in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 1..30),
        cut_frac in 0.0f64..1.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut sizes = Vec::new();
        {
            let log = EventLog::open(dir.path(), config(1 << 20)).unwrap();
            log.create_stream(&stream(1, 1 << 20)).unwrap();
            for v in &values {
                log.append("s", b"key", v).unwrap();
                sizes.push(std::fs::metadata(dir.path().join("s/0/0.seg")).unwrap().len());
            }
        }
        let full = *sizes.last().unwrap();
        let cut = (full as f64 * cut_frac) as u64;
        OpenOptions::new().write(true).open(dir.path().join("s/0/0.seg")).unwrap().set_len(cut).unwrap();
        let survivors = sizes.iter().filter(|&&end| end <= cut).count();
        let log = EventLog::open(dir.path(), config(1 << 20)).unwrap();
        let report = log.recovery_report();
        let boundary = cut == 0 || sizes.contains(&cut);
        prop_assert_eq!(report.torn_tails(), usize::from(!boundary));
        let got: Vec<_> = log.read("s", 0, 0, usize::MAX).unwrap().into_iter().map(|r| r.value).collect();
        prop_assert_eq!(got, values[..survivors].to_vec());
        // Appending after recovery continues at the next offset.
        let (_, off) = log.append("s", b"key", b"after").unwrap();
        prop_assert_eq!(off, survivors as u64);
    }
}
