//! Structured logs on stderr: one JSON object per line with `ts`, `stage`,
//! `level` and `msg`. The level filter comes from `TESTBED_LOG`
//! (env_logger syntax, default `info`).

use std::io::Write;

use chrono::{SecondsFormat, Utc};
use serde_json::json;

/// Pipeline stage a log target belongs to.
pub fn stage(target: &str) -> &'static str {
    let path = target.strip_prefix("iot_testbed::").unwrap_or(target);
    let first = path.split("::").next().unwrap_or("");
    match first {
        "broker" => "broker",
        "client" => "client",
        "eventlog" if path.starts_with("eventlog::bridge") => "bridge",
        "eventlog" => "log",
        "simulators" => "sim",
        "store" => "store",
        "gateway" => "gateway",
        "pipeline" => "pipeline",
        _ if target.starts_with("testbed") => "cli",
        _ => "deps",
    }
}

pub fn format_line(target: &str, level: log::Level, msg: &str) -> String {
    json!({
        "ts": Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        "stage": stage(target),
        "level": level.as_str().to_ascii_lowercase(),
        "msg": msg,
    })
    .to_string()
}

/// Installs the logger; later calls are no-ops.
pub fn init() {
    let env = env_logger::Env::default().filter_or("TESTBED_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = format_line(record.target(), record.level(), &record.args().to_string());
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}
