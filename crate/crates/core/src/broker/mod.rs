//! Embedded publish/subscribe broker speaking an MQTT 3.1.1 subset over TCP.

pub mod codec;
pub mod router;
pub mod server;
pub mod session;
pub mod topic;

pub use codec::{decode_packet, encode_packet, CodecError, Packet, Publish, QoS, SubackCode};
pub use router::{SessionId, SubscriptionTable};
pub use server::{start, BrokerConfig, BrokerHandle, BrokerStats};
pub use session::{Action, ProtocolViolation, Session};
pub use topic::{topic_matches, TopicError, TopicFilter, TopicName};
