use std::ffi::{CStr, CString};
use std::ptr;

use iot_testbed_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = tb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    tb_string_free(p);
    s
}

const READING: &str = r#"{"sensor_id":"S01","ts":"2017-03-01T08:00:00Z","twmv":1,"carv":3,"busv":0,"lgv":0,"hgv":2,"hgvr2":1,"hgvr3":0,"hgvr4":0,"hgva3":1,"hgva5":0}"#;

#[test]
fn helpers() {
    assert_eq!(tb_fnv1a64(ptr::null(), 0), 0xcbf29ce484222325);
    assert_eq!(tb_fnv1a64(b"a".as_ptr(), 1), 0xaf63dc4c8601ec8c);
    let mut p = 99;
    unsafe {
        assert_eq!(tb_partition_for_key(b"S01".as_ptr(), 3, 4, &mut p), TbStatus::Ok);
        assert_eq!(u64::from(p), tb_fnv1a64(b"S01".as_ptr(), 3) % 4);
        assert_eq!(tb_partition_for_key(b"S01".as_ptr(), 3, 0, &mut p), TbStatus::InvalidArgument);
        assert!(last_error().contains("partition_count"));
        assert_eq!(tb_partition_for_key(b"S01".as_ptr(), 3, 4, ptr::null_mut()), TbStatus::NullArgument);

        let mut m = false;
        assert_eq!(tb_topic_matches(c("a/#").as_ptr(), c("a").as_ptr(), &mut m), TbStatus::Ok);
        assert!(m);
        assert_eq!(tb_topic_matches(c("+").as_ptr(), c("a/b").as_ptr(), &mut m), TbStatus::Ok);
        assert!(!m);
        assert_eq!(tb_topic_matches(c("a/#/b").as_ptr(), c("a").as_ptr(), &mut m), TbStatus::InvalidArgument);
        assert!(tb_last_error().is_null() || !last_error().is_empty());
        assert!(CStr::from_ptr(tb_version()).to_str().unwrap().starts_with("0."));
    }
}

#[test]
fn payload_canonicalization() {
    let spaced = READING.replace(',', ", ");
    let mut out = ptr::null_mut();
    unsafe {
        let st = tb_payload_canonicalize(c("traffic").as_ptr(), spaced.as_ptr(), spaced.len(), &mut out);
        assert_eq!(st, TbStatus::Ok);
        assert_eq!(take(out), READING);
        let bad = br#"{"sensor_id":"S01"}"#;
        let st = tb_payload_canonicalize(c("traffic").as_ptr(), bad.as_ptr(), bad.len(), &mut out);
        assert_eq!(st, TbStatus::InvalidPayload);
        let st = tb_payload_canonicalize(c("parking").as_ptr(), bad.as_ptr(), bad.len(), &mut out);
        assert_eq!(st, TbStatus::InvalidArgument);
    }
}

#[test]
fn log_and_store_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().to_str().unwrap());
    unsafe {
        let mut log = ptr::null_mut();
        assert_eq!(tb_log_open(path.as_ptr(), 2, &mut log), TbStatus::Ok);
        let mut second = ptr::null_mut();
        assert_eq!(tb_log_open(path.as_ptr(), 2, &mut second), TbStatus::Locked);
        assert!(second.is_null());

        let stream = c("traffic");
        assert_eq!(tb_log_ensure_stream(log, stream.as_ptr()), TbStatus::Ok);
        let mut n = 0;
        assert_eq!(tb_log_partition_count(log, stream.as_ptr(), &mut n), TbStatus::Ok);
        assert_eq!(n, 2);
        let (mut part, mut off) = (0u32, 0u64);
        for _ in 0..2 {
            let st = tb_log_append(log, stream.as_ptr(), b"S01".as_ptr(), 3, READING.as_ptr(), READING.len(), &mut part, &mut off);
            assert_eq!(st, TbStatus::Ok);
        }
        assert_eq!(off, 1);
        let mut hw = 0;
        assert_eq!(tb_log_high_watermark(log, stream.as_ptr(), part, &mut hw), TbStatus::Ok);
        assert_eq!(hw, 2);
        assert_eq!(tb_log_high_watermark(log, c("nope").as_ptr(), 0, &mut hw), TbStatus::UnknownStream);

        let mut json = ptr::null_mut();
        assert_eq!(tb_log_read_json(log, stream.as_ptr(), part, 0, 10, &mut json), TbStatus::Ok);
        let records: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(records.as_array().unwrap().len(), 2);
        assert_eq!(records[1]["offset"], 1);
        assert_eq!(records[0]["key"], "S01");
        assert_eq!(records[0]["value"], READING);

        let mut store = ptr::null_mut();
        assert_eq!(tb_store_new(40.0, &mut store), TbStatus::Ok);
        let mut inserted = 0;
        assert_eq!(tb_store_consume(store, log, &mut inserted), TbStatus::Ok);
        assert_eq!(inserted, 1);
        let (mut t, mut l) = (0, 0);
        assert_eq!(tb_store_row_counts(store, &mut t, &mut l), TbStatus::Ok);
        assert_eq!((t, l), (1, 0));

        let q = c("from=2017-03-01&hour_from=8&hour_to=8&classes=carv,hgv");
        assert_eq!(tb_store_query_traffic(store, q.as_ptr(), &mut json), TbStatus::Ok);
        let series: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(series["groups"][0]["points"][0]["value"], 5.0);

        let q = c("from=2017-03-01&hour_from=24");
        assert_eq!(tb_store_query_traffic(store, q.as_ptr(), &mut json), TbStatus::InvalidSpec);
        assert!(last_error().contains("hour_from"));
        let q = c("sensor=L1&date=2017-03-01");
        assert_eq!(tb_store_query_energy_total(store, q.as_ptr(), &mut json), TbStatus::UnknownSensor);
        let q = c("from=2017-03-01");
        assert_eq!(tb_store_query_energy(store, q.as_ptr(), &mut json), TbStatus::Ok);
        tb_string_free(json);

        tb_store_free(store);
        tb_log_close(log);
        tb_log_close(ptr::null_mut());
        tb_store_free(ptr::null_mut());

        let mut follower = ptr::null_mut();
        assert_eq!(tb_log_open_follower(path.as_ptr(), &mut follower), TbStatus::Ok);
        assert_eq!(tb_log_refresh(follower), TbStatus::Ok);
        let st = tb_log_append(follower, stream.as_ptr(), b"k".as_ptr(), 1, b"v".as_ptr(), 1, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, TbStatus::ReadOnly);
        let mut loaded = ptr::null_mut();
        assert_eq!(tb_store_load(path.as_ptr(), 40.0, &mut loaded), TbStatus::Ok);
        assert_eq!(tb_store_consume(loaded, follower, ptr::null_mut()), TbStatus::Ok);
        assert_eq!(tb_store_row_counts(loaded, &mut t, ptr::null_mut()), TbStatus::Ok);
        assert_eq!(t, 1);
        tb_store_free(loaded);
        tb_log_close(follower);
    }
}

#[test]
fn null_handles_are_reported() {
    unsafe {
        let mut n = 0;
        assert_eq!(tb_log_partition_count(ptr::null(), c("x").as_ptr(), &mut n), TbStatus::NullArgument);
        assert!(last_error().contains("log"));
        assert_eq!(tb_store_row_counts(ptr::null(), ptr::null_mut(), ptr::null_mut()), TbStatus::NullArgument);
        let mut out = ptr::null_mut();
        assert_eq!(tb_store_new(f64::NAN, &mut out), TbStatus::InvalidArgument);
    }
}
