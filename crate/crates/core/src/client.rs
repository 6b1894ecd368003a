//! Minimal reconnecting MQTT 3.1.1 client used by the simulators and the
//! bridge.
//!
//! A driver task owns the socket. Publishes are pipelined up to an
//! in-flight window; unacknowledged ones are resent with DUP after a
//! reconnect, and subscriptions are re-established on every new
//! connection.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Buf, Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch, OwnedSemaphorePermit, Semaphore};

use crate::broker::codec::{decode_packet, encode_into, CodecError, Packet, Publish, QoS, SubackCode};
use crate::broker::topic::{TopicFilter, TopicName};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client has shut down")]
    Closed,
    #[error("broker refused connection with code {0}")]
    Refused(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub addr: String,
    pub client_id: String,
    pub keep_alive_s: u16,
    pub inflight: usize,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl ClientOptions {
    pub fn new(addr: impl Into<String>, client_id: impl Into<String>) -> Self {
        ClientOptions {
            addr: addr.into(),
            client_id: client_id.into(),
            keep_alive_s: 30,
            inflight: 256,
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(30),
        }
    }
}

/// A message delivered by the broker. QoS 1 messages must be passed to
/// [`MqttClient::ack`] once processed.
#[derive(Debug, Clone)]
pub struct Incoming {
    pub topic: TopicName,
    pub payload: Bytes,
    pub qos: QoS,
    packet_id: Option<u16>,
    generation: u64,
}

enum Command {
    Publish {
        topic: TopicName,
        payload: Bytes,
        qos: QoS,
        permit: Option<OwnedSemaphorePermit>,
        done: oneshot::Sender<()>,
    },
    Subscribe {
        filters: Vec<(TopicFilter, QoS)>,
        reply: oneshot::Sender<Vec<SubackCode>>,
    },
    Ack {
        packet_id: u16,
        generation: u64,
    },
    Flush(oneshot::Sender<()>),
    Disconnect(oneshot::Sender<()>),
}

/// Resolves once the broker acknowledged the publish (QoS 1) or the
/// packet was written (QoS 0).
pub struct PublishAck(oneshot::Receiver<()>);

impl PublishAck {
    pub async fn wait(self) -> Result<(), ClientError> {
        self.0.await.map_err(|_| ClientError::Closed)
    }
}

#[derive(Clone)]
pub struct MqttClient {
    cmd: mpsc::UnboundedSender<Command>,
    window: Arc<Semaphore>,
    generation: watch::Receiver<u64>,
}

impl MqttClient {
    /// Spawns the driver and waits for the first successful CONNACK,
    /// retrying with backoff.
    pub async fn connect(
        opts: ClientOptions,
    ) -> Result<(MqttClient, mpsc::Receiver<Incoming>), ClientError> {
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (in_tx, in_rx) = mpsc::channel(4096);
        let (gen_tx, mut gen_rx) = watch::channel(0u64);
        let window = Arc::new(Semaphore::new(opts.inflight.max(1)));
        let driver = Driver {
            opts,
            cmd_rx,
            incoming: in_tx,
            generation: gen_tx,
            inflight: BTreeMap::new(),
            order: VecDeque::new(),
            subscriptions: Vec::new(),
            pending_subs: BTreeMap::new(),
            next_id: 1,
            gen: 0,
            flush_waiters: Vec::new(),
        };
        tokio::spawn(driver.run());
        gen_rx
            .wait_for(|g| *g > 0)
            .await
            .map_err(|_| ClientError::Closed)?;
        Ok((
            MqttClient {
                cmd: cmd_tx,
                window,
                generation: gen_rx,
            },
            in_rx,
        ))
    }

    /// Number of connections established so far.
    pub fn generation(&self) -> u64 {
        *self.generation.borrow()
    }

    pub async fn publish(
        &self,
        topic: TopicName,
        payload: impl Into<Bytes>,
        qos: QoS,
    ) -> Result<PublishAck, ClientError> {
        let permit = match qos {
            QoS::AtMostOnce => None,
            QoS::AtLeastOnce => Some(
                Arc::clone(&self.window)
                    .acquire_owned()
                    .await
                    .map_err(|_| ClientError::Closed)?,
            ),
        };
        let (done, rx) = oneshot::channel();
        self.cmd
            .send(Command::Publish {
                topic,
                payload: payload.into(),
                qos,
                permit,
                done,
            })
            .map_err(|_| ClientError::Closed)?;
        Ok(PublishAck(rx))
    }

    pub async fn subscribe(
        &self,
        filters: Vec<(TopicFilter, QoS)>,
    ) -> Result<Vec<SubackCode>, ClientError> {
        let (reply, rx) = oneshot::channel();
        self.cmd
            .send(Command::Subscribe { filters, reply })
            .map_err(|_| ClientError::Closed)?;
        rx.await.map_err(|_| ClientError::Closed)
    }

    /// Acknowledges a QoS 1 message. Acks for messages received on an
    /// earlier connection are dropped; the broker redelivers those.
    pub fn ack(&self, msg: &Incoming) {
        if let Some(packet_id) = msg.packet_id {
            let _ = self.cmd.send(Command::Ack {
                packet_id,
                generation: msg.generation,
            });
        }
    }

    /// Waits until every QoS 1 publish issued so far is acknowledged.
    pub async fn flush(&self) -> Result<(), ClientError> {
        let (tx, rx) = oneshot::channel();
        self.cmd
            .send(Command::Flush(tx))
            .map_err(|_| ClientError::Closed)?;
        rx.await.map_err(|_| ClientError::Closed)
    }

    pub async fn disconnect(&self) {
        let (tx, rx) = oneshot::channel();
        if self.cmd.send(Command::Disconnect(tx)).is_ok() {
            let _ = rx.await;
        }
    }
}

struct InFlight {
    publish: Publish,
    _permit: Option<OwnedSemaphorePermit>,
    done: oneshot::Sender<()>,
}

struct Driver {
    opts: ClientOptions,
    cmd_rx: mpsc::UnboundedReceiver<Command>,
    incoming: mpsc::Sender<Incoming>,
    generation: watch::Sender<u64>,
    inflight: BTreeMap<u16, InFlight>,
    /// Packet ids of `inflight` in publish order, for resending.
    order: VecDeque<u16>,
    subscriptions: Vec<(TopicFilter, QoS)>,
    pending_subs: BTreeMap<u16, Vec<oneshot::Sender<Vec<SubackCode>>>>,
    next_id: u16,
    gen: u64,
    flush_waiters: Vec<oneshot::Sender<()>>,
}

enum Exit {
    Shutdown,
    Lost(ClientError),
}

impl Driver {
    fn allocate_id(&mut self) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&id) && !self.pending_subs.contains_key(&id) {
                return id;
            }
        }
    }

    async fn run(mut self) {
        let mut backoff = self.opts.backoff_initial;
        loop {
            let before = self.gen;
            match self.session().await {
                Exit::Shutdown => return,
                Exit::Lost(e) if self.gen > 0 => {
                    log::warn!("{}: connection lost: {e}", self.opts.client_id)
                }
                Exit::Lost(e) => log::debug!("{}: connect failed: {e}", self.opts.client_id),
            }
            if self.cmd_rx.is_closed() && self.inflight.is_empty() {
                return;
            }
            if self.gen > before {
                backoff = self.opts.backoff_initial;
            }
            tokio::time::sleep(backoff).await;
            backoff = (backoff * 2).min(self.opts.backoff_max);
        }
    }

    async fn handshake(&mut self) -> Result<(TcpStream, BytesMut), ClientError> {
        let mut stream = TcpStream::connect(&self.opts.addr).await?;
        stream.set_nodelay(true)?;
        let mut out = Vec::new();
        encode_into(
            &Packet::Connect {
                client_id: self.opts.client_id.clone(),
                keep_alive_s: self.opts.keep_alive_s,
            },
            &mut out,
        );
        stream.write_all(&out).await?;
        let mut buf = BytesMut::with_capacity(16 * 1024);
        let packet = loop {
            match decode_packet(&buf) {
                Ok((p, used)) => {
                    buf.advance(used);
                    break p;
                }
                Err(CodecError::Truncated) => {
                    if stream.read_buf(&mut buf).await? == 0 {
                        return Err(ClientError::Protocol("closed before CONNACK".into()));
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };
        match packet {
            Packet::Connack { return_code: 0 } => Ok((stream, buf)),
            Packet::Connack { return_code } => Err(ClientError::Refused(return_code)),
            other => Err(ClientError::Protocol(format!("expected CONNACK, got {other:?}"))),
        }
    }

    async fn session(&mut self) -> Exit {
        let (stream, mut buf) =
            match tokio::time::timeout(HANDSHAKE_TIMEOUT, self.handshake()).await {
                Ok(Ok(s)) => s,
                Ok(Err(e)) => return Exit::Lost(e),
                Err(_) => return Exit::Lost(ClientError::Protocol("handshake timed out".into())),
            };
        let (mut rd, mut wr) = stream.into_split();
        let mut out = Vec::new();

        // Replies to subscribes sent on the dead connection ride on the
        // resubscribe below.
        let waiting: Vec<_> = std::mem::take(&mut self.pending_subs)
            .into_values()
            .flatten()
            .collect();
        if !self.subscriptions.is_empty() {
            let id = self.allocate_id();
            encode_into(
                &Packet::Subscribe {
                    packet_id: id,
                    filters: self.subscriptions.clone(),
                },
                &mut out,
            );
            self.pending_subs.insert(id, waiting);
        }
        for id in &self.order {
            let mut p = self.inflight[id].publish.clone();
            p.dup = true;
            encode_into(&Packet::Publish(p), &mut out);
        }

        self.gen += 1;
        let _ = self.generation.send(self.gen);
        log::info!("{}: connected to {}", self.opts.client_id, self.opts.addr);

        let keep_alive = Duration::from_secs(u64::from(self.opts.keep_alive_s.max(1)));
        let mut ping = tokio::time::interval(keep_alive);
        ping.tick().await;

        loop {
            if !out.is_empty() {
                if let Err(e) = wr.write_all(&out).await {
                    return Exit::Lost(e.into());
                }
                out.clear();
            }
            tokio::select! {
                read = rd.read_buf(&mut buf) => match read {
                    Ok(0) => return Exit::Lost(ClientError::Protocol("broker closed connection".into())),
                    Ok(_) => loop {
                        match decode_packet(&buf) {
                            Ok((p, used)) => {
                                buf.advance(used);
                                if let Err(e) = self.on_packet(p, &mut out).await {
                                    return Exit::Lost(e);
                                }
                            }
                            Err(CodecError::Truncated) => break,
                            Err(e) => return Exit::Lost(e.into()),
                        }
                    },
                    Err(e) => return Exit::Lost(e.into()),
                },
                cmd = self.cmd_rx.recv() => match cmd {
                    Some(Command::Disconnect(tx)) => {
                        out.clear();
                        encode_into(&Packet::Disconnect, &mut out);
                        let _ = wr.write_all(&out).await;
                        let _ = wr.shutdown().await;
                        let _ = tx.send(());
                        return Exit::Shutdown;
                    }
                    Some(cmd) => self.on_command(cmd, &mut out),
                    None => {
                        if self.inflight.is_empty() {
                            let _ = wr.shutdown().await;
                            return Exit::Shutdown;
                        }
                    }
                },
                _ = ping.tick() => encode_into(&Packet::Pingreq, &mut out),
            }
        }
    }

    fn on_command(&mut self, cmd: Command, out: &mut Vec<u8>) {
        match cmd {
            Command::Publish {
                topic,
                payload,
                qos,
                permit,
                done,
            } => match qos {
                QoS::AtMostOnce => {
                    encode_into(&Packet::Publish(Publish::qos0(topic, payload)), out);
                    let _ = done.send(());
                }
                QoS::AtLeastOnce => {
                    let id = self.allocate_id();
                    let publish = Publish::qos1(topic, payload, id);
                    encode_into(&Packet::Publish(publish.clone()), out);
                    self.order.push_back(id);
                    self.inflight.insert(
                        id,
                        InFlight {
                            publish,
                            _permit: permit,
                            done,
                        },
                    );
                }
            },
            Command::Subscribe { filters, reply } => {
                let id = self.allocate_id();
                for (f, q) in &filters {
                    self.subscriptions.retain(|(g, _)| g != f);
                    self.subscriptions.push((f.clone(), *q));
                }
                encode_into(
                    &Packet::Subscribe {
                        packet_id: id,
                        filters,
                    },
                    out,
                );
                self.pending_subs.insert(id, vec![reply]);
            }
            Command::Ack {
                packet_id,
                generation,
            } => {
                if generation == self.gen {
                    encode_into(&Packet::Puback { packet_id }, out);
                }
            }
            Command::Flush(tx) => {
                if self.inflight.is_empty() {
                    let _ = tx.send(());
                } else {
                    self.flush_waiters.push(tx);
                }
            }
            Command::Disconnect(_) => unreachable!("handled by the session loop"),
        }
    }

    async fn on_packet(&mut self, packet: Packet, out: &mut Vec<u8>) -> Result<(), ClientError> {
        match packet {
            Packet::Puback { packet_id } => {
                if let Some(f) = self.inflight.remove(&packet_id) {
                    let _ = f.done.send(());
                    if let Some(pos) = self.order.iter().position(|id| *id == packet_id) {
                        self.order.remove(pos);
                    }
                }
                if self.inflight.is_empty() {
                    for w in self.flush_waiters.drain(..) {
                        let _ = w.send(());
                    }
                }
            }
            Packet::Suback { packet_id, granted } => {
                for reply in self.pending_subs.remove(&packet_id).unwrap_or_default() {
                    let _ = reply.send(granted.clone());
                }
            }
            Packet::Publish(p) => {
                let incoming = Incoming {
                    topic: p.topic,
                    payload: p.payload,
                    qos: p.qos,
                    packet_id: p.packet_id,
                    generation: self.gen,
                };
                if self.incoming.send(incoming).await.is_err() {
                    // Nobody is listening; acknowledge so the broker does
                    // not keep retransmitting.
                    if let Some(packet_id) = p.packet_id {
                        encode_into(&Packet::Puback { packet_id }, out);
                    }
                }
            }
            Packet::Pingresp | Packet::Unsuback { .. } => {}
            other => {
                return Err(ClientError::Protocol(format!(
                    "unexpected packet from broker: {other:?}"
                )))
            }
        }
        Ok(())
    }
}
