#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use iot_testbed::broker::{self, BrokerConfig, BrokerHandle};
use iot_testbed::eventlog::bridge::{Bridge, BridgeConfig};
use iot_testbed::eventlog::{EventLog, LogConfig};
use tokio::sync::watch;

pub mod conformance;

pub const TESTBED: &str = env!("CARGO_BIN_EXE_testbed");

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Copies a scenario with its ports and data directory replaced.
pub fn scenario_copy(name: &str, dir: &Path, broker_port: u16, gateway_port: u16) -> PathBuf {
    let text = std::fs::read_to_string(scenarios_dir().join(name)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["broker"]["port"] = broker_port.into();
    v["gateway"]["port"] = gateway_port.into();
    v["log"]["data_dir"] = dir.join("data").to_str().unwrap().into();
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

pub fn testbed(args: &[&str]) -> Command {
    let mut c = Command::new(TESTBED);
    c.args(args).env("TESTBED_LOG", "warn");
    c
}

/// A child process killed when dropped.
pub struct Proc(pub Child);

impl Proc {
    pub fn spawn(args: &[&str]) -> Proc {
        Proc(testbed(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap())
    }

    pub fn interrupt(&mut self) -> std::process::ExitStatus {
        let _ = Command::new("kill").args(["-INT", &self.0.id().to_string()]).status();
        self.wait_timeout(Duration::from_secs(20)).expect("exits after SIGINT")
    }

    pub fn kill9(&mut self) {
        let _ = Command::new("kill").args(["-9", &self.0.id().to_string()]).status();
        let _ = self.0.wait();
    }

    pub fn wait_timeout(&mut self, limit: Duration) -> Option<std::process::ExitStatus> {
        let deadline = Instant::now() + limit;
        while Instant::now() < deadline {
            if let Some(s) = self.0.try_wait().unwrap() {
                return Some(s);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        None
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

pub async fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    f()
}

pub async fn wait_for_http(addr: &str, limit: Duration) {
    let url = format!("http://{addr}/api/meta");
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if let Ok(r) = reqwest::get(&url).await {
            if r.status().is_success() {
                return;
            }
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("{url} did not come up");
}

/// Broker plus bridge writing into `dir`, all in this process.
pub struct Rig {
    pub broker: Option<BrokerHandle>,
    pub broker_config: BrokerConfig,
    pub log: Arc<EventLog>,
    pub stop: watch::Sender<bool>,
    pub bridge: tokio::task::JoinHandle<()>,
}

impl Rig {
    pub async fn start(dir: &Path, hold_unrouted: Option<Duration>) -> Rig {
        let mut broker_config = BrokerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            hold_unrouted,
            ..BrokerConfig::default()
        };
        let broker = broker::start(broker_config.clone()).await.unwrap();
        broker_config.bind = broker.local_addr();
        let log = Arc::new(EventLog::open(dir, LogConfig::default()).unwrap());
        let (stop, rx) = watch::channel(false);
        let mut cfg = BridgeConfig::new(broker.local_addr().to_string());
        cfg.client.backoff_initial = Duration::from_millis(50);
        let bridge = Bridge::new(Arc::clone(&log), cfg).unwrap();
        let bridge = tokio::spawn(async move {
            bridge.run(rx).await.unwrap();
        });
        Rig {
            broker: Some(broker),
            broker_config,
            log,
            stop,
            bridge,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.broker_config.bind
    }

    pub async fn restart_broker(&mut self) {
        if let Some(b) = self.broker.take() {
            b.shutdown().await;
        }
        for _ in 0..100 {
            if let Ok(b) = broker::start(self.broker_config.clone()).await {
                self.broker = Some(b);
                return;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("broker did not restart");
    }

    pub async fn stop(mut self) {
        let _ = self.stop.send(true);
        let _ = self.bridge.await;
        if let Some(b) = self.broker.take() {
            b.shutdown().await;
        }
    }
}

pub fn traffic_payload(sensor: &str, minute: u32, carv: u32) -> String {
    format!(
        r#"{{"sensor_id":"{sensor}","ts":"{}","twmv":0,"carv":{carv},"busv":0,"lgv":0,"hgv":0,"hgvr2":0,"hgvr3":0,"hgvr4":0,"hgva3":0,"hgva5":0}}"#,
        (Utc.with_ymd_and_hms(2017, 3, 1, 8, 0, 0).unwrap() + chrono::Duration::minutes(i64::from(minute)))
            .format("%Y-%m-%dT%H:%M:%SZ")
    )
}

/// API paths covering every grouping, bucket, distribution and filter.
pub fn traffic_queries() -> Vec<String> {
    let d = "from=2017-03-01";
    [
        format!("{d}"),
        format!("{d}&to=2017-03-01&bucket=minute"),
        format!("{d}&bucket=day"),
        format!("{d}&group_by=sensor"),
        format!("{d}&group_by=date"),
        format!("{d}&sensors=S01"),
        format!("{d}&sensors=S02&bucket=minute"),
        format!("{d}&sensors=S01,S02&group_by=sensor"),
        format!("{d}&classes=carv"),
        format!("{d}&classes=carv,busv,hgv&bucket=minute"),
        format!("{d}&classes=lgv&group_by=sensor"),
        format!("{d}&distribution=average_per_minute"),
        format!("{d}&distribution=average_per_minute&bucket=minute"),
        format!("{d}&distribution=average_per_minute&group_by=sensor"),
        format!("{d}&distribution=average_per_minute&group_by=date&classes=carv"),
        format!("{d}&hour_from=8&hour_to=8"),
        format!("{d}&hour_from=8&hour_to=8&bucket=minute&sensors=S01"),
        format!("{d}&hour_from=9&hour_to=23"),
        format!("{d}&hour_from=0&hour_to=7&group_by=sensor"),
        format!("from=2017-02-28&to=2017-03-02&group_by=date&sensors=S01"),
    ]
    .into_iter()
    .map(|q| format!("/api/traffic/series?{q}"))
    .collect()
}

pub fn lighting_queries() -> Vec<String> {
    vec![
        "/api/lighting/energy?from=2017-03-01".into(),
        "/api/lighting/energy?from=2017-03-01&bucket=minute&sensors=L101".into(),
        "/api/lighting/energy?from=2017-03-01&group_by=sensor&hour_from=6&hour_to=18".into(),
        "/api/lighting/total?sensor=L101&date=2017-03-01".into(),
        "/api/lighting/total?sensor=L102&date=2017-03-01&hour_from=9&hour_to=17".into(),
    ]
}

pub async fn get_body(addr: &str, path: &str) -> (u16, String) {
    let r = reqwest::get(format!("http://{addr}{path}")).await.unwrap();
    (r.status().as_u16(), r.text().await.unwrap())
}

/// Both shipped scenarios merged into one file.
pub fn combined_scenario(dir: &Path, broker_port: u16, gateway_port: u16) -> PathBuf {
    let read = |n: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(scenarios_dir().join(n)).unwrap()).unwrap()
    };
    let mut v = read("traffic-2sensor.json");
    v["lighting"] = read("lighting-2room.json")["lighting"].clone();
    v["broker"]["port"] = broker_port.into();
    v["gateway"]["port"] = gateway_port.into();
    v["log"]["data_dir"] = dir.join("data").to_str().unwrap().into();
    let path = dir.join("combined.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

/// Minimal server-sent events reader over a streaming response.
pub struct SseReader {
    resp: reqwest::Response,
    buf: String,
}

impl SseReader {
    pub async fn connect(addr: &str) -> SseReader {
        let resp = reqwest::get(format!("http://{addr}/api/stream")).await.unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        SseReader { resp, buf: String::new() }
    }

    /// Next (event, data) pair, skipping comments. `None` on timeout or end.
    pub async fn next(&mut self, limit: Duration) -> Option<(String, String)> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..end + 2).collect();
                let (mut event, mut data) = (String::from("message"), Vec::new());
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("event:") {
                        event = v.trim_start().to_owned();
                    } else if let Some(v) = line.strip_prefix("data:") {
                        data.push(v.trim_start().to_owned());
                    }
                }
                if data.is_empty() {
                    continue;
                }
                return Some((event, data.join("\n")));
            }
            let chunk = tokio::time::timeout_at(deadline, self.resp.chunk()).await.ok()?.ok()??;
            self.buf.push_str(&String::from_utf8_lossy(&chunk));
        }
    }
}
