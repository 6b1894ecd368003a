//! Per-connection session state machine.
//!
//! [`Session::handle_packet`] is pure with respect to I/O: it returns an
//! ordered list of [`Action`]s that the connection task executes. Inbound
//! QoS 1 publishes are acknowledged only once every matching subscriber
//! holds the message (see [`DeliveryAck`]), and PUBACKs leave in the order
//! the publishes arrived.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::codec::{Packet, Publish, QoS, SubackCode};
use super::topic::{TopicFilter, TopicName};

pub const RETRANSMIT_INITIAL: Duration = Duration::from_secs(5);
pub const RETRANSMIT_CAP: Duration = Duration::from_secs(60);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("protocol violation: {0}")]
pub struct ProtocolViolation(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    ClientDisconnect,
    KeepAliveExpired,
    SlowSubscriber,
    DeliveryFailed,
    Protocol,
    TakenOver,
}

#[derive(Debug)]
pub enum Action {
    Send(Packet),
    /// Hand the message to every matching subscriber. When `ack_id` is set,
    /// report back through [`Session::inbound_settled`] once they all hold it.
    Route {
        publish: Publish,
        ack_id: Option<u16>,
    },
    Subscribe(Vec<(TopicFilter, QoS)>),
    Unsubscribe(Vec<TopicFilter>),
    Close(CloseReason),
}

type SettleFn = dyn Fn(u16, bool) + Send + Sync;

/// Tracks the outstanding deliveries of one inbound QoS 1 publish.
pub struct AckGroup {
    packet_id: u16,
    remaining: AtomicUsize,
    failed: AtomicBool,
    settle: Box<SettleFn>,
}

impl AckGroup {
    /// `settle(packet_id, ok)` runs exactly once, after the last delivery
    /// completes or is dropped.
    pub fn new(
        packet_id: u16,
        deliveries: usize,
        settle: impl Fn(u16, bool) + Send + Sync + 'static,
    ) -> Arc<Self> {
        assert!(deliveries > 0, "an ack group needs at least one delivery");
        Arc::new(AckGroup {
            packet_id,
            remaining: AtomicUsize::new(deliveries),
            failed: AtomicBool::new(false),
            settle: Box::new(settle),
        })
    }

    pub fn delivery(self: &Arc<Self>) -> DeliveryAck {
        DeliveryAck {
            group: Arc::clone(self),
            settled: false,
        }
    }

    fn finish_one(&self, ok: bool) {
        if !ok {
            self.failed.store(true, Ordering::SeqCst);
        }
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            (self.settle)(self.packet_id, !self.failed.load(Ordering::SeqCst));
        }
    }
}

/// One subscriber's share of an [`AckGroup`]. Dropping it without calling
/// [`DeliveryAck::complete`] marks the whole group failed.
pub struct DeliveryAck {
    group: Arc<AckGroup>,
    settled: bool,
}

impl DeliveryAck {
    pub fn complete(mut self) {
        self.settled = true;
        self.group.finish_one(true);
    }
}

impl Drop for DeliveryAck {
    fn drop(&mut self) {
        if !self.settled {
            self.group.finish_one(false);
        }
    }
}

impl std::fmt::Debug for DeliveryAck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeliveryAck")
            .field("packet_id", &self.group.packet_id)
            .finish()
    }
}

#[derive(Debug)]
struct PendingDelivery {
    publish: Publish,
    ack: Option<DeliveryAck>,
    retry_at: Instant,
    backoff: Duration,
}

#[derive(Debug, Clone, Copy)]
struct InboundSlot {
    packet_id: u16,
    done: bool,
}

#[derive(Debug)]
pub struct Session {
    client_id: String,
    connected: bool,
    keep_alive: Duration,
    last_inbound: Instant,
    subscriptions: BTreeMap<TopicFilter, QoS>,
    pending: BTreeMap<u16, PendingDelivery>,
    next_packet_id: u16,
    inbound: VecDeque<InboundSlot>,
    acked_inbound: HashSet<u16>,
    retransmit_initial: Duration,
}

impl Session {
    pub fn new(now: Instant) -> Self {
        Session {
            client_id: String::new(),
            connected: false,
            keep_alive: Duration::ZERO,
            last_inbound: now,
            subscriptions: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_packet_id: 1,
            inbound: VecDeque::new(),
            acked_inbound: HashSet::new(),
            retransmit_initial: RETRANSMIT_INITIAL,
        }
    }

    pub fn with_retransmit_initial(mut self, d: Duration) -> Self {
        self.retransmit_initial = d;
        self
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn subscriptions(&self) -> &BTreeMap<TopicFilter, QoS> {
        &self.subscriptions
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.pending.keys().copied()
    }

    /// Instant after which the session is closed for silence, if any.
    pub fn keep_alive_deadline(&self) -> Option<Instant> {
        if self.keep_alive.is_zero() {
            None
        } else {
            Some(self.last_inbound + self.keep_alive.mul_f64(1.5))
        }
    }

    pub fn keep_alive_expired(&self, now: Instant) -> bool {
        self.keep_alive_deadline().is_some_and(|d| now > d)
    }

    pub fn handle_packet(
        &mut self,
        packet: Packet,
        now: Instant,
    ) -> Result<Vec<Action>, ProtocolViolation> {
        self.last_inbound = now;
        if !self.connected && !matches!(packet, Packet::Connect { .. }) {
            return Err(ProtocolViolation(format!(
                "{} before CONNECT",
                packet_name(&packet)
            )));
        }
        let actions = match packet {
            Packet::Connect {
                client_id,
                keep_alive_s,
            } => {
                if self.connected {
                    return Err(ProtocolViolation("second CONNECT".into()));
                }
                self.connected = true;
                self.client_id = client_id;
                self.keep_alive = Duration::from_secs(u64::from(keep_alive_s));
                vec![Action::Send(Packet::Connack { return_code: 0 })]
            }
            Packet::Publish(publish) => self.inbound_publish(publish),
            Packet::Puback { packet_id } => {
                if let Some(PendingDelivery { ack: Some(ack), .. }) =
                    self.pending.remove(&packet_id)
                {
                    ack.complete();
                }
                Vec::new()
            }
            Packet::Subscribe { packet_id, filters } => {
                let granted = filters
                    .iter()
                    .map(|(_, q)| SubackCode::Granted((*q).min(QoS::AtLeastOnce)))
                    .collect();
                let filters: Vec<_> = filters
                    .into_iter()
                    .map(|(f, q)| (f, q.min(QoS::AtLeastOnce)))
                    .collect();
                for (f, q) in &filters {
                    self.subscriptions.insert(f.clone(), *q);
                }
                vec![
                    Action::Subscribe(filters),
                    Action::Send(Packet::Suback { packet_id, granted }),
                ]
            }
            Packet::Unsubscribe { packet_id, filters } => {
                for f in &filters {
                    self.subscriptions.remove(f);
                }
                vec![
                    Action::Unsubscribe(filters),
                    Action::Send(Packet::Unsuback { packet_id }),
                ]
            }
            Packet::Pingreq => vec![Action::Send(Packet::Pingresp)],
            Packet::Disconnect => vec![Action::Close(CloseReason::ClientDisconnect)],
            other @ (Packet::Connack { .. }
            | Packet::Suback { .. }
            | Packet::Unsuback { .. }
            | Packet::Pingresp) => {
                return Err(ProtocolViolation(format!(
                    "client sent server-only packet {}",
                    packet_name(&other)
                )))
            }
        };
        Ok(actions)
    }

    fn inbound_publish(&mut self, publish: Publish) -> Vec<Action> {
        let Some(id) = publish.packet_id else {
            return vec![Action::Route {
                publish,
                ack_id: None,
            }];
        };
        if self.inbound.iter().any(|s| s.packet_id == id) {
            // Retransmission of a message still being delivered; its PUBACK
            // follows when delivery settles.
            return Vec::new();
        }
        if publish.dup && self.acked_inbound.contains(&id) {
            return vec![Action::Send(Packet::Puback { packet_id: id })];
        }
        self.acked_inbound.remove(&id);
        self.inbound.push_back(InboundSlot {
            packet_id: id,
            done: false,
        });
        vec![Action::Route {
            publish,
            ack_id: Some(id),
        }]
    }

    /// Records the outcome of routing inbound `packet_id`. Returns the
    /// PUBACKs that are now releasable in arrival order, or a close when a
    /// subscriber lost the message so the publisher retries.
    pub fn inbound_settled(&mut self, packet_id: u16, ok: bool) -> Vec<Action> {
        if !ok {
            return vec![Action::Close(CloseReason::DeliveryFailed)];
        }
        if let Some(slot) = self.inbound.iter_mut().find(|s| s.packet_id == packet_id) {
            slot.done = true;
        }
        let mut actions = Vec::new();
        while let Some(front) = self.inbound.front() {
            if !front.done {
                break;
            }
            let id = front.packet_id;
            self.inbound.pop_front();
            self.acked_inbound.insert(id);
            actions.push(Action::Send(Packet::Puback { packet_id: id }));
        }
        actions
    }

    fn allocate_packet_id(&mut self) -> Option<u16> {
        if self.pending.len() >= usize::from(u16::MAX) {
            return None;
        }
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.pending.contains_key(&id) {
                return Some(id);
            }
        }
    }

    /// Builds the outbound PUBLISH for one delivery at `qos`. QoS 1
    /// deliveries get a fresh packet id and stay pending until PUBACK;
    /// QoS 0 deliveries settle immediately. Returns `None` when the packet
    /// id space is exhausted.
    pub fn deliver(
        &mut self,
        topic: TopicName,
        payload: bytes::Bytes,
        qos: QoS,
        ack: Option<DeliveryAck>,
        now: Instant,
    ) -> Option<Packet> {
        match qos {
            QoS::AtMostOnce => {
                if let Some(ack) = ack {
                    ack.complete();
                }
                Some(Packet::Publish(Publish::qos0(topic, payload)))
            }
            QoS::AtLeastOnce => {
                let id = self.allocate_packet_id()?;
                let publish = Publish::qos1(topic, payload, id);
                self.pending.insert(
                    id,
                    PendingDelivery {
                        publish: publish.clone(),
                        ack,
                        retry_at: now + self.retransmit_initial,
                        backoff: self.retransmit_initial,
                    },
                );
                Some(Packet::Publish(publish))
            }
        }
    }

    /// Pending deliveries whose retransmit timer expired, marked DUP; each
    /// timer doubles up to [`RETRANSMIT_CAP`].
    pub fn due_retransmits(&mut self, now: Instant) -> Vec<Packet> {
        let mut out = Vec::new();
        for pending in self.pending.values_mut() {
            if pending.retry_at <= now {
                pending.backoff = (pending.backoff * 2).min(RETRANSMIT_CAP);
                pending.retry_at = now + pending.backoff;
                let mut publish = pending.publish.clone();
                publish.dup = true;
                out.push(Packet::Publish(publish));
            }
        }
        out
    }
}

fn packet_name(p: &Packet) -> &'static str {
    match p {
        Packet::Connect { .. } => "CONNECT",
        Packet::Connack { .. } => "CONNACK",
        Packet::Publish(_) => "PUBLISH",
        Packet::Puback { .. } => "PUBACK",
        Packet::Subscribe { .. } => "SUBSCRIBE",
        Packet::Suback { .. } => "SUBACK",
        Packet::Unsubscribe { .. } => "UNSUBSCRIBE",
        Packet::Unsuback { .. } => "UNSUBACK",
        Packet::Pingreq => "PINGREQ",
        Packet::Pingresp => "PINGRESP",
        Packet::Disconnect => "DISCONNECT",
    }
}
