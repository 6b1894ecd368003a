use std::time::Duration;

use bytes::Bytes;
use iot_testbed::broker::codec::{decode_packet, encode_packet, Packet, Publish, QoS, SubackCode};
use iot_testbed::broker::{TopicFilter, TopicName};
use iot_testbed::model::VehicleClass;
use iot_testbed::store::consumer::consume_available;
use iot_testbed::store::Store;
use proptest::prelude::*;
use rumqttc::{AsyncClient, Event, MqttOptions, Packet as RPacket};

/// (filter, topic, matches) under MQTT 3.1.1 rules.
pub const TOPIC_TABLE: [(&str, &str, bool); 25] = [
    ("a", "a", true),
    ("a", "b", false),
    ("A", "a", false),
    ("a/+", "a/b", true),
    ("a/+", "a", false),
    ("a/+", "a/b/c", false),
    ("+", "a", true),
    ("+", "a/b", false),
    ("+/+", "a/b", true),
    ("#", "a", true),
    ("#", "a/b/c", true),
    ("a/#", "a", true),
    ("a/#", "a/b", true),
    ("a/#", "a/b/c", true),
    ("a/#", "b", false),
    ("a/+/c", "a/b/c", true),
    ("a/+/c", "a/b/d", false),
    ("+/b/#", "a/b", true),
    ("/+", "/a", true),
    ("+", "/a", false),
    ("+/+", "/a", true),
    ("a/+/b", "a//b", true),
    ("#", "$SYS/uptime", false),
    ("+/uptime", "$SYS/uptime", false),
    ("$SYS/#", "$SYS/uptime", true),
];

pub fn level() -> impl Strategy<Value = String> {
    "[a-z0-9]{0,4}"
}

pub fn name() -> impl Strategy<Value = TopicName> {
    prop::collection::vec(level(), 1..5)
        .prop_map(|l| l.join("/"))
        .prop_filter("non-empty", |s| !s.is_empty())
        .prop_map(|s| TopicName::new(s).unwrap())
}

pub fn filter() -> impl Strategy<Value = TopicFilter> {
    (
        prop::collection::vec(prop_oneof![level(), Just("+".to_string())], 1..5),
        any::<bool>(),
    )
        .prop_map(|(mut l, hash)| {
            if hash {
                l.push("#".into());
            }
            l.join("/")
        })
        .prop_filter("non-empty", |s| !s.is_empty())
        .prop_map(|s| TopicFilter::new(s).unwrap())
}

pub fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

pub fn packet() -> impl Strategy<Value = Packet> {
    let publish = (name(), prop::collection::vec(any::<u8>(), 0..300), qos(), 1..=u16::MAX, any::<bool>()).prop_map(
        |(topic, payload, qos, id, dup)| {
            Packet::Publish(match qos {
                QoS::AtMostOnce => Publish::qos0(topic, Bytes::from(payload)),
                QoS::AtLeastOnce => Publish {
                    dup,
                    ..Publish::qos1(topic, Bytes::from(payload), id)
                },
            })
        },
    );
    prop_oneof![
        ("[a-zA-Z0-9]{0,23}", any::<u16>()).prop_map(|(client_id, keep_alive_s)| Packet::Connect {
            client_id,
            keep_alive_s
        }),
        (0u8..=5).prop_map(|return_code| Packet::Connack { return_code }),
        publish,
        (1..=u16::MAX).prop_map(|packet_id| Packet::Puback { packet_id }),
        (1..=u16::MAX, prop::collection::vec((filter(), qos()), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Subscribe { packet_id, filters }),
        (
            1..=u16::MAX,
            prop::collection::vec(prop_oneof![qos().prop_map(SubackCode::Granted), Just(SubackCode::Failure)], 1..5)
        )
            .prop_map(|(packet_id, granted)| Packet::Suback { packet_id, granted }),
        (1..=u16::MAX, prop::collection::vec(filter(), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Unsubscribe { packet_id, filters }),
        (1..=u16::MAX).prop_map(|packet_id| Packet::Unsuback { packet_id }),
        Just(Packet::Pingreq),
        Just(Packet::Pingresp),
        Just(Packet::Disconnect),
    ]
}

/// Encodes `p`, decodes it back whole and checks that every strict prefix
/// is rejected.
pub fn check_roundtrip(p: &Packet) -> Result<(), TestCaseError> {
    let bytes = encode_packet(p);
    let (decoded, used) = decode_packet(&bytes).map_err(|e| TestCaseError::fail(format!("{e:?}")))?;
    prop_assert_eq!(used, bytes.len());
    prop_assert_eq!(&decoded, p);
    for cut in 0..bytes.len() {
        prop_assert!(decode_packet(&bytes[..cut]).is_err());
    }
    Ok(())
}

/// Publishes `n` QoS 1 readings and one undecodable QoS 0 message through
/// broker and bridge with rumqttc. Returns (pubacks, stored rows, carv sum,
/// dead-letter records).
pub async fn rumqttc_publish(n: u32) -> (u32, usize, u64, u64) {
    let dir = tempfile::tempdir().unwrap();
    let rig = super::Rig::start(dir.path(), Some(Duration::from_secs(10))).await;
    let mut opts = MqttOptions::new("rumqttc-publisher", "127.0.0.1", rig.addr().port());
    opts.set_keep_alive(Duration::from_secs(10));
    let (client, mut events) = AsyncClient::new(opts, 64);
    let publisher = tokio::spawn(async move {
        for i in 0..n {
            let payload = super::traffic_payload("S01", i, i);
            client
                .publish("city/traffic/S01", rumqttc::QoS::AtLeastOnce, false, payload)
                .await
                .unwrap();
        }
        client
            .publish("city/traffic/S01", rumqttc::QoS::AtMostOnce, false, "garbage")
            .await
            .unwrap();
        client
    });
    let mut acked = 0;
    let mut connected = false;
    while acked < n {
        match tokio::time::timeout(Duration::from_secs(10), events.poll()).await.unwrap().unwrap() {
            Event::Incoming(RPacket::PubAck(_)) => acked += 1,
            Event::Incoming(RPacket::ConnAck(c)) => connected = c.code == rumqttc::ConnectReturnCode::Success,
            _ => {}
        }
    }
    assert!(connected);
    let _client = publisher.await.unwrap();
    let log = rig.log.clone();
    let dlq = iot_testbed::eventlog::partition_for_key(b"city/traffic/S01", 4);
    super::wait_until(Duration::from_secs(5), || log.high_watermark("traffic.dlq", dlq).unwrap_or(0) == 1).await;
    let store = Store::new(40.0);
    consume_available(&rig.log, &store, None).unwrap();
    let carv = store
        .traffic_rows()
        .iter()
        .map(|r| u64::from(r.reading.count(VehicleClass::Carv)))
        .sum();
    let out = (acked, store.traffic_row_count(), carv, rig.log.high_watermark("traffic.dlq", dlq).unwrap());
    rig.stop().await;
    out
}
