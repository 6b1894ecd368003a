mod common;

use std::time::Duration;

use bytes::Bytes;
use iot_testbed::broker::codec::{decode_packet, encode_packet, QoS};
use iot_testbed::broker::{topic_matches, TopicFilter, TopicName};
use iot_testbed::client::{ClientOptions, MqttClient};
use proptest::prelude::*;
use rumqttc::{AsyncClient, Event, MqttOptions, Packet as RPacket};

use common::conformance::{check_roundtrip, name, packet, rumqttc_publish, TOPIC_TABLE};

#[test]
fn topic_match_table() {
    for (filter, topic, want) in TOPIC_TABLE {
        let f = TopicFilter::new(filter).unwrap();
        let t = TopicName::new(topic).unwrap();
        assert_eq!(topic_matches(&f, &t), want, "{filter} vs {topic}");
    }
}

#[test]
fn invalid_filters_and_names() {
    for bad in ["a/#/b", "a+", "#a", "a/b#", "", "a/+b"] {
        assert!(TopicFilter::new(bad).is_err(), "{bad:?}");
    }
    for bad in ["a/+", "#", "", "a\0b"] {
        assert!(TopicName::new(bad).is_err(), "{bad:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_roundtrip(p in packet()) {
        check_roundtrip(&p)?;
    }

    #[test]
    fn back_to_back_packets(ps in prop::collection::vec(packet(), 1..6)) {
        let stream: Vec<u8> = ps.iter().flat_map(encode_packet).collect();
        let mut pos = 0;
        for p in &ps {
            let (d, used) = decode_packet(&stream[pos..]).unwrap();
            prop_assert_eq!(&d, p);
            pos += used;
        }
        prop_assert_eq!(pos, stream.len());
    }

    #[test]
    fn hash_suffix_matches_parent(n in name()) {
        let f = TopicFilter::new(format!("{}/#", n.as_str())).unwrap();
        prop_assert!(topic_matches(&f, &n));
    }
}

/// An off-the-shelf client publishes QoS 1 into the pipeline; every
/// PUBACK it receives corresponds to a stored row.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn third_party_client_publishes_into_pipeline() {
    let n = 50;
    assert_eq!(rumqttc_publish(n).await, (n, n as usize, u64::from(n * (n - 1) / 2), 1));
}

/// Our client and a third-party subscriber interoperate through the broker
/// at both QoS levels.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn third_party_client_subscribes() {
    let broker = iot_testbed::broker::start(iot_testbed::broker::BrokerConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        ..Default::default()
    })
    .await
    .unwrap();
    let port = broker.local_addr().port();
    let (sub, mut events) = AsyncClient::new(MqttOptions::new("rumqttc-sub", "127.0.0.1", port), 64);
    sub.subscribe("sensors/+/temp", rumqttc::QoS::AtLeastOnce).await.unwrap();
    loop {
        if let Event::Incoming(RPacket::SubAck(s)) = events.poll().await.unwrap() {
            assert_eq!(s.return_codes, vec![rumqttc::SubscribeReasonCode::Success(rumqttc::QoS::AtLeastOnce)]);
            break;
        }
    }
    let (ours, _rx) = MqttClient::connect(ClientOptions::new(broker.local_addr().to_string(), "ours")).await.unwrap();
    let t = |s: &str| TopicName::new(s).unwrap();
    ours.publish(t("sensors/a/temp"), Bytes::from_static(b"21"), QoS::AtLeastOnce).await.unwrap();
    ours.publish(t("sensors/a/humidity"), Bytes::from_static(b"x"), QoS::AtMostOnce).await.unwrap();
    ours.publish(t("sensors/b/temp"), Bytes::from_static(b"22"), QoS::AtMostOnce).await.unwrap();
    let mut got = Vec::new();
    while got.len() < 2 {
        let ev = tokio::time::timeout(Duration::from_secs(5), events.poll()).await.unwrap().unwrap();
        if let Event::Incoming(RPacket::Publish(p)) = ev {
            got.push((p.topic.clone(), p.payload.to_vec(), p.qos));
        }
    }
    assert_eq!(
        got,
        vec![
            ("sensors/a/temp".to_string(), b"21".to_vec(), rumqttc::QoS::AtLeastOnce),
            ("sensors/b/temp".to_string(), b"22".to_vec(), rumqttc::QoS::AtMostOnce),
        ]
    );
    // The QoS 1 publish is acknowledged only after rumqttc acked delivery.
    tokio::time::timeout(Duration::from_secs(5), ours.flush()).await.unwrap().unwrap();
    ours.disconnect().await;
    broker.shutdown().await;
}
