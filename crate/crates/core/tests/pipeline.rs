mod common;

use std::sync::Arc;
use std::time::Duration;

use iot_testbed::broker::codec::QoS;
use iot_testbed::broker::TopicName;
use iot_testbed::client::{ClientOptions, MqttClient};
use iot_testbed::eventlog::bridge::{Bridge, BridgeConfig};
use iot_testbed::pipeline::{self, Demo, DemoOptions};
use iot_testbed::scenario::ScenarioFile;
use iot_testbed::store::consumer::{consume_available, rebuild_from_log};
use iot_testbed::store::Store;
use tokio::sync::watch;

use common::{get_body, Proc, Rig};

async fn publisher(rig: &Rig, id: &str) -> MqttClient {
    let mut opts = ClientOptions::new(rig.addr().to_string(), id);
    opts.backoff_initial = Duration::from_millis(50);
    opts.backoff_max = Duration::from_millis(200);
    MqttClient::connect(opts).await.unwrap().0
}

async fn publish_minutes(client: &MqttClient, range: std::ops::Range<u32>) {
    let topic = TopicName::new("city/traffic/S01").unwrap();
    for m in range {
        client
            .publish(topic.clone(), common::traffic_payload("S01", m, m), QoS::AtLeastOnce)
            .await
            .unwrap();
    }
}

fn stored(rig: &Rig) -> Store {
    let store = Store::new(40.0);
    consume_available(&rig.log, &store, None).unwrap();
    store
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn broker_restart_loses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut rig = Rig::start(dir.path(), Some(Duration::from_secs(30))).await;
    let client = publisher(&rig, "restart-pub").await;
    publish_minutes(&client, 0..20).await;
    client.flush().await.unwrap();
    rig.restart_broker().await;
    publish_minutes(&client, 20..40).await;
    tokio::time::timeout(Duration::from_secs(20), client.flush()).await.unwrap().unwrap();
    assert!(client.generation() >= 2);
    let store = stored(&rig);
    assert_eq!(store.traffic_row_count(), 40);
    assert_eq!(store.dead_letters(), 0);
    client.disconnect().await;
    rig.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bridge_restart_picks_up_parked_messages() {
    let dir = tempfile::tempdir().unwrap();
    let rig = Rig::start(dir.path(), Some(Duration::from_secs(30))).await;
    let client = publisher(&rig, "bridge-restart-pub").await;
    publish_minutes(&client, 0..10).await;
    client.flush().await.unwrap();

    let _ = rig.stop.send(true);
    let Rig { broker, broker_config, log, bridge, .. } = rig;
    bridge.await.unwrap();
    publish_minutes(&client, 10..25).await;
    // Nobody is subscribed, so nothing can be acknowledged yet.
    assert!(tokio::time::timeout(Duration::from_millis(300), client.flush()).await.is_err());

    let (stop, rx) = watch::channel(false);
    let bridge = Bridge::new(Arc::clone(&log), BridgeConfig::new(broker_config.bind.to_string())).unwrap();
    let task = tokio::spawn(bridge.run(rx));
    tokio::time::timeout(Duration::from_secs(10), client.flush()).await.unwrap().unwrap();
    let store = Store::new(40.0);
    consume_available(&log, &store, None).unwrap();
    assert_eq!(store.traffic_row_count(), 25);
    client.disconnect().await;
    let _ = stop.send(true);
    task.await.unwrap().unwrap();
    broker.unwrap().shutdown().await;
}

async fn run_demo(path: &std::path::Path) -> (Demo, ScenarioFile) {
    let scenario = ScenarioFile::load(path).unwrap();
    let mut demo = Demo::start(&scenario, DemoOptions::default()).await.unwrap();
    demo.wait_for_simulators().await.unwrap();
    let store = Arc::clone(&demo.store);
    let log = Arc::clone(&demo.log);
    let caught_up = common::wait_until(Duration::from_secs(20), || {
        let total: u64 = log
            .streams()
            .iter()
            .map(|s| (0..log.partition_count(s).unwrap()).map(|p| log.high_watermark(s, p).unwrap()).sum::<u64>())
            .sum();
        store.traffic_row_count() + store.lighting_row_count() + store.dead_letters() as usize == total as usize
    })
    .await;
    assert!(caught_up);
    (demo, scenario)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn replay_rebuilds_the_live_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::combined_scenario(dir.path(), 0, 0);
    let (demo, scenario) = run_demo(&path).await;
    let live = Arc::clone(&demo.store);
    let summary = demo.stop().await.unwrap();
    assert_eq!(summary.traffic_rows, 120);
    assert!(summary.lighting_rows > 0);

    let data_dir = scenario.log.data_dir.clone();
    let report = pipeline::replay(&data_dir, scenario.power_w()).unwrap();
    assert_eq!(report.traffic_rows, summary.traffic_rows);
    assert_eq!(report.lighting_rows, summary.lighting_rows);
    assert_eq!(report.dead_letters, 0);
    assert_eq!(report.torn_tails, 0);
    assert_eq!(report.alternation_violations, 0);

    let log = iot_testbed::eventlog::EventLog::open(&data_dir, pipeline::log_config(4)).unwrap();
    let rebuilt = Store::new(scenario.power_w());
    rebuild_from_log(&log, &rebuilt).unwrap();
    assert_eq!(rebuilt.traffic_rows(), live.traffic_rows());
    assert_eq!(rebuilt.lighting_rows(), live.lighting_rows());
    let from_snapshot = pipeline::load_store(&data_dir, scenario.power_w()).unwrap();
    assert_eq!(from_snapshot.traffic_rows(), live.traffic_rows());
    assert_eq!(from_snapshot.lighting_rows(), live.lighting_rows());
}

/// Separate broker, bridge, ingest, serve and simulator processes give the
/// same API answers as the single-process demo.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn process_topology_matches_demo() {
    let demo_dir = tempfile::tempdir().unwrap();
    let path = common::combined_scenario(demo_dir.path(), 0, 0);
    let (demo, _) = run_demo(&path).await;
    let demo_addr = demo.gateway_addr.to_string();

    let dir = tempfile::tempdir().unwrap();
    let (bport, gport) = (common::free_port(), common::free_port());
    let scenario = common::combined_scenario(dir.path(), bport, gport);
    let data = dir.path().join("data");
    let (data_s, scen_s) = (data.to_str().unwrap(), scenario.to_str().unwrap());
    let broker_addr = format!("127.0.0.1:{bport}");
    let mut procs = vec![Proc::spawn(&["broker", "--port", &bport.to_string()])];
    procs.push(Proc::spawn(&["bridge", "--broker", &broker_addr, "--data-dir", data_s]));
    assert!(common::wait_until(Duration::from_secs(10), || data.join("groups.json").exists() || data.join(".lock").exists()).await);
    procs.push(Proc::spawn(&["ingest", "--data-dir", data_s]));
    procs.push(Proc::spawn(&["serve", "--data-dir", data_s, "--port", &gport.to_string(), "--scenario", scen_s]));
    let gateway = format!("127.0.0.1:{gport}");
    common::wait_for_http(&gateway, Duration::from_secs(20)).await;
    for kind in ["traffic", "lighting"] {
        let status = common::testbed(&["sim", kind, "--scenario", scen_s, "--broker", &broker_addr])
            .status()
            .unwrap();
        assert!(status.success(), "{kind} simulator failed");
    }
    let want = demo.store.traffic_row_count() + demo.store.lighting_row_count();
    let mut ready = false;
    for _ in 0..100 {
        let meta: serde_json::Value = serde_json::from_str(&get_body(&gateway, "/api/meta").await.1).unwrap();
        let (_, t) = get_body(&gateway, "/api/traffic/series?from=2017-03-01&bucket=day").await;
        let (_, d) = get_body(&demo_addr, "/api/traffic/series?from=2017-03-01&bucket=day").await;
        let (_, le) = get_body(&gateway, "/api/lighting/energy?from=2017-03-01&bucket=day").await;
        let (_, ld) = get_body(&demo_addr, "/api/lighting/energy?from=2017-03-01&bucket=day").await;
        if t == d && le == ld && meta["lighting"]["sensors"].as_array().is_some_and(|a| a.len() == 2) {
            ready = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert!(ready, "serve never caught up with {want} rows");
    for q in common::traffic_queries().iter().chain(&common::lighting_queries()) {
        let ours = get_body(&gateway, q).await;
        let theirs = get_body(&demo_addr, q).await;
        assert_eq!(ours, theirs, "{q}");
    }
    let (_, m1) = get_body(&gateway, "/api/meta").await;
    let (_, m2) = get_body(&demo_addr, "/api/meta").await;
    assert_eq!(m1, m2);
    for p in procs.iter_mut().rev() {
        assert!(p.interrupt().success());
    }
    // The ingest process left a snapshot a fresh serve can start from.
    let snap = pipeline::load_store(&data, 40.0).unwrap();
    assert_eq!(snap.traffic_row_count() + snap.lighting_row_count(), want);
    demo.stop().await.unwrap();
}
