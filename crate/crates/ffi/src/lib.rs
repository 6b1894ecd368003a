//! C ABI over the testbed's event log, store and codecs.
//!
//! Handles are opaque pointers created by `tb_*_open`/`tb_*_new` and
//! released by the matching `*_close`/`*_free`. Every fallible call returns
//! a [`TbStatus`]; on failure [`tb_last_error`] describes it. Strings
//! returned through `char **` out-parameters are owned by the caller and
//! must be released with [`tb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use iot_testbed::broker::{topic_matches, TopicFilter, TopicName};
use iot_testbed::eventlog::{fnv1a64, partition_for_key, EventLog, LogConfig, LogError};
use iot_testbed::gateway::params;
use iot_testbed::model::{Payload, UseCase};
use iot_testbed::store::consumer::consume_available;
use iot_testbed::store::snapshot::{load_snapshot, SNAPSHOT_FILE};
use iot_testbed::store::{QueryError, Store};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Locked = 4,
    ReadOnly = 5,
    UnknownStream = 6,
    Corrupt = 7,
    InvalidSpec = 8,
    UnknownSensor = 9,
    InvalidPayload = 10,
    Panic = 11,
}

/// An open event log.
pub struct TbLog {
    inner: EventLog,
}

/// An in-memory store.
pub struct TbStore {
    inner: Store,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TbStatus, String);

impl From<LogError> for Failure {
    fn from(e: LogError) -> Self {
        let status = match e {
            LogError::UnknownStream(_) => TbStatus::UnknownStream,
            LogError::BadPartition { .. } | LogError::OffsetBeyondEnd { .. } => TbStatus::InvalidArgument,
            LogError::InvalidConfig(_) | LogError::KeyTooLong(_) => TbStatus::InvalidArgument,
            LogError::ReadOnly => TbStatus::ReadOnly,
            LogError::Locked => TbStatus::Locked,
            LogError::Corrupt(_) => TbStatus::Corrupt,
            _ => TbStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<QueryError> for Failure {
    fn from(e: QueryError) -> Self {
        let status = match e {
            QueryError::InvalidSpec(_) => TbStatus::InvalidSpec,
            QueryError::UnknownSensor(_) => TbStatus::UnknownSensor,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting failures and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            TbStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(TbStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TbStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, name: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn query_pairs(query: &str) -> params::Params {
    form_urlencoded::parse(query.as_bytes()).into_owned().collect()
}

fn invalid_spec(e: iot_testbed::store::InvalidSpec) -> Failure {
    Failure(TbStatus::InvalidSpec, e.to_string())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn tb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn tb_fnv1a64(key: *const u8, key_len: usize) -> u64 {
    if key.is_null() && key_len > 0 {
        return 0;
    }
    let bytes = if key_len == 0 { &[][..] } else { unsafe { slice::from_raw_parts(key, key_len) } };
    fnv1a64(bytes)
}

/// # Safety
/// `key` must point to `key_len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_partition_for_key(
    key: *const u8,
    key_len: usize,
    partition_count: u32,
    out: *mut u32,
) -> TbStatus {
    guard(|| {
        let key = bytes_arg(key, key_len, "key")?;
        let out = out_arg(out, "out")?;
        if partition_count == 0 {
            return Err(Failure(TbStatus::InvalidArgument, "partition_count must be at least 1".into()));
        }
        *out = partition_for_key(key, partition_count);
        Ok(())
    })
}

/// MQTT topic filter matching.
///
/// # Safety
/// `filter` and `topic` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_topic_matches(filter: *const c_char, topic: *const c_char, out: *mut bool) -> TbStatus {
    guard(|| {
        let filter = TopicFilter::new(str_arg(filter, "filter")?)
            .map_err(|e| Failure(TbStatus::InvalidArgument, format!("filter: {e}")))?;
        let topic = TopicName::new(str_arg(topic, "topic")?)
            .map_err(|e| Failure(TbStatus::InvalidArgument, format!("topic: {e}")))?;
        *out_arg(out, "out")? = topic_matches(&filter, &topic);
        Ok(())
    })
}

/// Validates a `traffic` or `lighting` payload and returns its canonical
/// encoding.
///
/// # Safety
/// `use_case` must be NUL-terminated, `payload` must point to `len`
/// readable bytes and `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_payload_canonicalize(
    use_case: *const c_char,
    payload: *const u8,
    len: usize,
    out_json: *mut *mut c_char,
) -> TbStatus {
    guard(|| {
        let use_case: UseCase = str_arg(use_case, "use_case")?
            .parse()
            .map_err(|e| Failure(TbStatus::InvalidArgument, e))?;
        let payload = bytes_arg(payload, len, "payload")?;
        let out = out_arg(out_json, "out_json")?;
        let p = Payload::decode(use_case, payload).map_err(|e| Failure(TbStatus::InvalidPayload, e.to_string()))?;
        *out = c_string(String::from_utf8(p.encode()).expect("payloads are JSON"));
        Ok(())
    })
}

/// Opens (creating if needed) a log directory for writing. Fails with
/// `Locked` if another writer holds it.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_log_open(dir: *const c_char, default_partitions: u32, out: *mut *mut TbLog) -> TbStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let config = LogConfig {
            default_partitions,
            ..LogConfig::default()
        };
        let log = EventLog::open(dir, config)?;
        *out = Box::into_raw(Box::new(TbLog { inner: log }));
        Ok(())
    })
}

/// Opens an existing log read-only alongside a writer in another process.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_log_open_follower(dir: *const c_char, out: *mut *mut TbLog) -> TbStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let log = EventLog::open_follower(dir, LogConfig::default())?;
        *out = Box::into_raw(Box::new(TbLog { inner: log }));
        Ok(())
    })
}

/// Picks up records appended by the writer since the last call.
///
/// # Safety
/// `log` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_log_refresh(log: *const TbLog) -> TbStatus {
    guard(|| {
        handle(log, "log")?.inner.refresh()?;
        Ok(())
    })
}

/// # Safety
/// `log` must come from `tb_log_open*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_log_close(log: *mut TbLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

/// # Safety
/// `log` must be a live handle and `stream` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tb_log_ensure_stream(log: *const TbLog, stream: *const c_char) -> TbStatus {
    guard(|| {
        let log = handle(log, "log")?;
        log.inner.ensure_stream(str_arg(stream, "stream")?)?;
        Ok(())
    })
}

/// Appends one record durably and reports where it landed.
///
/// # Safety
/// Pointers must be valid for the given lengths; out-parameters may be
/// null if not wanted.
#[no_mangle]
pub unsafe extern "C" fn tb_log_append(
    log: *const TbLog,
    stream: *const c_char,
    key: *const u8,
    key_len: usize,
    value: *const u8,
    value_len: usize,
    out_partition: *mut u32,
    out_offset: *mut u64,
) -> TbStatus {
    guard(|| {
        let log = handle(log, "log")?;
        let stream = str_arg(stream, "stream")?;
        let key = bytes_arg(key, key_len, "key")?;
        let value = bytes_arg(value, value_len, "value")?;
        let (p, o) = log.inner.append(stream, key, value)?;
        if let Some(out) = out_partition.as_mut() {
            *out = p;
        }
        if let Some(out) = out_offset.as_mut() {
            *out = o;
        }
        Ok(())
    })
}

/// # Safety
/// `log` must be a live handle, `stream` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_log_partition_count(log: *const TbLog, stream: *const c_char, out: *mut u32) -> TbStatus {
    guard(|| {
        let log = handle(log, "log")?;
        *out_arg(out, "out")? = log.inner.partition_count(str_arg(stream, "stream")?)?;
        Ok(())
    })
}

/// # Safety
/// `log` must be a live handle, `stream` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_log_high_watermark(
    log: *const TbLog,
    stream: *const c_char,
    partition: u32,
    out: *mut u64,
) -> TbStatus {
    guard(|| {
        let log = handle(log, "log")?;
        *out_arg(out, "out")? = log.inner.high_watermark(str_arg(stream, "stream")?, partition)?;
        Ok(())
    })
}

/// Reads up to `max` records from `from` as a JSON array of
/// `{"offset", "key", "value", "ingest_ts"}`; key and value are decoded
/// as UTF-8 with replacement.
///
/// # Safety
/// `log` must be a live handle, `stream` NUL-terminated, `out_json`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_log_read_json(
    log: *const TbLog,
    stream: *const c_char,
    partition: u32,
    from: u64,
    max: usize,
    out_json: *mut *mut c_char,
) -> TbStatus {
    guard(|| {
        let log = handle(log, "log")?;
        let stream = str_arg(stream, "stream")?;
        let out = out_arg(out_json, "out_json")?;
        let records: Vec<_> = log
            .inner
            .read(stream, partition, from, max)?
            .into_iter()
            .map(|r| {
                serde_json::json!({
                    "offset": r.offset,
                    "key": String::from_utf8_lossy(&r.key),
                    "value": String::from_utf8_lossy(&r.value),
                    "ingest_ts": r.ingest_ts,
                })
            })
            .collect();
        *out = c_string(serde_json::to_string(&records).expect("results serialize"));
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_store_new(power_w: f64, out: *mut *mut TbStore) -> TbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !(power_w.is_finite() && power_w >= 0.0) {
            return Err(Failure(TbStatus::InvalidArgument, "power_w must be finite and non-negative".into()));
        }
        *out = Box::into_raw(Box::new(TbStore {
            inner: Store::new(power_w),
        }));
        Ok(())
    })
}

/// Loads the snapshot in `data_dir`, or an empty store if there is none.
///
/// # Safety
/// `data_dir` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_store_load(data_dir: *const c_char, power_w: f64, out: *mut *mut TbStore) -> TbStatus {
    guard(|| {
        let dir = str_arg(data_dir, "data_dir")?;
        let out = out_arg(out, "out")?;
        let store = load_snapshot(&Path::new(dir).join(SNAPSHOT_FILE), power_w)
            .map_err(|e| Failure(TbStatus::Corrupt, e.to_string()))?
            .unwrap_or_else(|| Store::new(power_w));
        *out = Box::into_raw(Box::new(TbStore { inner: store }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from `tb_store_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_store_free(store: *mut TbStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Ingests every record the store has not yet seen. Does not commit a
/// consumer group.
///
/// # Safety
/// Handles must be live; `out_inserted` may be null.
#[no_mangle]
pub unsafe extern "C" fn tb_store_consume(store: *const TbStore, log: *const TbLog, out_inserted: *mut u64) -> TbStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let log = handle(log, "log")?;
        let counts = consume_available(&log.inner, &store.inner, None)?;
        if let Some(out) = out_inserted.as_mut() {
            *out = counts.inserted;
        }
        Ok(())
    })
}

/// # Safety
/// `store` must be live; out-parameters may be null.
#[no_mangle]
pub unsafe extern "C" fn tb_store_row_counts(store: *const TbStore, out_traffic: *mut u64, out_lighting: *mut u64) -> TbStatus {
    guard(|| {
        let store = handle(store, "store")?;
        if let Some(out) = out_traffic.as_mut() {
            *out = store.inner.traffic_row_count() as u64;
        }
        if let Some(out) = out_lighting.as_mut() {
            *out = store.inner.lighting_row_count() as u64;
        }
        Ok(())
    })
}

/// Traffic series for a query string in the HTTP API's format, e.g.
/// `from=2017-03-01&group_by=sensor`. Returns the same JSON body.
///
/// # Safety
/// `store` must be live, `query` NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_store_query_traffic(store: *const TbStore, query: *const c_char, out_json: *mut *mut c_char) -> TbStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let spec = params::traffic_spec(query_pairs(str_arg(query, "query")?)).map_err(invalid_spec)?;
        let out = out_arg(out_json, "out_json")?;
        *out = c_string(serde_json::to_string(&store.inner.query_traffic(&spec)?).expect("results serialize"));
        Ok(())
    })
}

/// Energy series; query string as for `/api/lighting/energy`.
///
/// # Safety
/// `store` must be live, `query` NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_store_query_energy(store: *const TbStore, query: *const c_char, out_json: *mut *mut c_char) -> TbStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let spec = params::energy_spec(query_pairs(str_arg(query, "query")?)).map_err(invalid_spec)?;
        let out = out_arg(out_json, "out_json")?;
        *out = c_string(serde_json::to_string(&store.inner.query_energy(&spec)?).expect("results serialize"));
        Ok(())
    })
}

/// Energy totals; query string as for `/api/lighting/total`.
///
/// # Safety
/// `store` must be live, `query` NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_store_query_energy_total(
    store: *const TbStore,
    query: *const c_char,
    out_json: *mut *mut c_char,
) -> TbStatus {
    guard(|| {
        let store = handle(store, "store")?;
        let p = params::total_params(query_pairs(str_arg(query, "query")?)).map_err(invalid_spec)?;
        let out = out_arg(out_json, "out_json")?;
        let totals = store
            .inner
            .query_energy_total(&p.sensor, p.date, p.hour_from, p.hour_to)?;
        *out = c_string(serde_json::to_string(&totals).expect("results serialize"));
        Ok(())
    })
}
