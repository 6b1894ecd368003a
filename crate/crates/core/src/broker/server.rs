//! TCP front end: one task per connection driving a [`Session`], plus the
//! shared subscription table.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::{Buf, Bytes, BytesMut};
use parking_lot::{Mutex, RwLock};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::{JoinHandle, JoinSet};

use super::codec::{decode_packet_limited, encode_into, CodecError, Publish, QoS};
use super::router::{SessionId, SubscriptionTable};
use super::session::{AckGroup, Action, CloseReason, DeliveryAck, Session, RETRANSMIT_INITIAL};
use super::topic::{TopicFilter, TopicName};

pub const DEFAULT_PORT: u16 = 1883;
pub const DEFAULT_MAX_PAYLOAD: usize = 256 * 1024;
pub const DEFAULT_OUTBOUND_QUEUE: usize = 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);
const TICK: Duration = Duration::from_millis(250);

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    pub max_payload: usize,
    /// Per-session outbound queue; a subscriber that lets it overflow is
    /// disconnected.
    pub outbound_queue: usize,
    pub retransmit_initial: Duration,
    /// When set, QoS 1 publishes that match no subscription are parked for
    /// up to this long and routed to the first session that subscribes to
    /// a matching filter. Their PUBACK is withheld meanwhile.
    pub hold_unrouted: Option<Duration>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            bind: SocketAddr::from(([0, 0, 0, 0], DEFAULT_PORT)),
            max_payload: DEFAULT_MAX_PAYLOAD,
            outbound_queue: DEFAULT_OUTBOUND_QUEUE,
            retransmit_initial: RETRANSMIT_INITIAL,
            hold_unrouted: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub connections: AtomicU64,
    pub publishes_in: AtomicU64,
    pub deliveries: AtomicU64,
    pub slow_subscriber_drops: AtomicU64,
}

struct Delivery {
    topic: TopicName,
    payload: Bytes,
    qos: QoS,
    ack: Option<DeliveryAck>,
}

struct SessionHandle {
    tx: mpsc::Sender<Delivery>,
    kill: Arc<Notify>,
}

enum Control {
    Settled { packet_id: u16, ok: bool },
}

type SettleTarget = (mpsc::UnboundedSender<Control>, u16);

struct Parked {
    publish: Publish,
    settle: SettleTarget,
    expires: Instant,
}

struct Shared {
    config: BrokerConfig,
    table: RwLock<SubscriptionTable<SessionHandle>>,
    parked: Mutex<VecDeque<Parked>>,
    client_ids: Mutex<HashMap<String, (SessionId, Arc<Notify>)>>,
    next_session: AtomicU64,
    stats: BrokerStats,
}

fn settle_fn(settle: SettleTarget) -> impl Fn(u16, bool) + Send + Sync + 'static {
    let (tx, _) = settle;
    move |packet_id, ok| {
        let _ = tx.send(Control::Settled { packet_id, ok });
    }
}

impl Shared {
    fn dispatch(
        &self,
        targets: &[(SessionId, QoS, &SessionHandle)],
        publish: &Publish,
        settle: Option<SettleTarget>,
    ) {
        let group = settle.map(|s| {
            let id = s.1;
            AckGroup::new(id, targets.len(), settle_fn(s))
        });
        for (_, qos, handle) in targets {
            let delivery = Delivery {
                topic: publish.topic.clone(),
                payload: publish.payload.clone(),
                qos: (*qos).min(publish.qos),
                ack: group.as_ref().map(|g| g.delivery()),
            };
            // A rejected delivery drops its ack, failing the group.
            if handle.tx.try_send(delivery).is_err() {
                self.stats.slow_subscriber_drops.fetch_add(1, Ordering::Relaxed);
                handle.kill.notify_one();
            } else {
                self.stats.deliveries.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Routing happens under the table read lock so it is atomic with
    /// respect to (un)subscribe.
    fn route(&self, publish: Publish, settle: Option<SettleTarget>) {
        let table = self.table.read();
        let targets = table.route_publish(&publish.topic);
        if targets.is_empty() {
            match (settle, self.config.hold_unrouted) {
                (Some(settle), Some(hold)) => self.parked.lock().push_back(Parked {
                    publish,
                    settle,
                    expires: Instant::now() + hold,
                }),
                (Some((tx, packet_id)), None) => {
                    let _ = tx.send(Control::Settled { packet_id, ok: true });
                }
                (None, _) => {}
            }
            return;
        }
        self.dispatch(&targets, &publish, settle);
    }

    fn subscribe(&self, sid: SessionId, filters: Vec<(TopicFilter, QoS)>) {
        let mut table = self.table.write();
        for (f, q) in filters {
            table.subscribe(sid, f, q);
        }
        let mut parked = self.parked.lock();
        if parked.is_empty() {
            return;
        }
        let mut still = VecDeque::with_capacity(parked.len());
        for p in parked.drain(..) {
            let targets = table.route_publish(&p.publish.topic);
            if targets.is_empty() {
                still.push_back(p);
            } else {
                self.dispatch(&targets, &p.publish, Some(p.settle));
            }
        }
        *parked = still;
    }

    fn expire_parked(&self, now: Instant) {
        let mut parked = self.parked.lock();
        while parked.front().is_some_and(|p| p.expires <= now) {
            let p = parked.pop_front().expect("front checked");
            let (tx, packet_id) = p.settle;
            let _ = tx.send(Control::Settled { packet_id, ok: true });
        }
    }
}

/// A running broker. Dropping the handle leaves it running; call
/// [`BrokerHandle::shutdown`] to stop it and sever every connection.
pub struct BrokerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    accept: JoinHandle<()>,
    janitor: JoinHandle<()>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.shared.stats
    }

    pub fn session_count(&self) -> usize {
        self.shared.table.read().len()
    }

    /// Stops accepting and aborts all connections without draining, the
    /// way a crashed broker would disappear.
    pub async fn shutdown(self) {
        self.accept.abort();
        self.janitor.abort();
        let _ = self.accept.await;
        let _ = self.janitor.await;
    }
}

pub async fn start(config: BrokerConfig) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(config.bind).await?;
    let local_addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        config,
        table: RwLock::new(SubscriptionTable::new()),
        parked: Mutex::new(VecDeque::new()),
        client_ids: Mutex::new(HashMap::new()),
        next_session: AtomicU64::new(1),
        stats: BrokerStats::default(),
    });
    log::info!("broker listening on {local_addr}");
    let accept = tokio::spawn(accept_loop(listener, Arc::clone(&shared)));
    let janitor_shared = Arc::clone(&shared);
    let janitor = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_millis(500));
        loop {
            tick.tick().await;
            janitor_shared.expire_parked(Instant::now());
        }
    });
    Ok(BrokerHandle {
        local_addr,
        shared,
        accept,
        janitor,
    })
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut connections = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    let sid = shared.next_session.fetch_add(1, Ordering::Relaxed);
                    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
                    log::debug!("connection {sid} from {peer}");
                    connections.spawn(run_connection(Arc::clone(&shared), stream, sid));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
        }
    }
}

struct Conn {
    shared: Arc<Shared>,
    sid: SessionId,
    session: Session,
    tx: mpsc::Sender<Delivery>,
    kill: Arc<Notify>,
    ctl_tx: mpsc::UnboundedSender<Control>,
    out: Vec<u8>,
    registered: bool,
}

impl Conn {
    fn execute(&mut self, actions: Vec<Action>) -> Result<(), CloseReason> {
        for action in actions {
            match action {
                Action::Send(p) => encode_into(&p, &mut self.out),
                Action::Route { publish, ack_id } => {
                    self.shared.stats.publishes_in.fetch_add(1, Ordering::Relaxed);
                    let settle = ack_id.map(|id| (self.ctl_tx.clone(), id));
                    self.shared.route(publish, settle);
                }
                Action::Subscribe(filters) => self.shared.subscribe(self.sid, filters),
                Action::Unsubscribe(filters) => {
                    let mut table = self.shared.table.write();
                    for f in &filters {
                        table.unsubscribe(self.sid, f);
                    }
                }
                Action::Close(reason) => return Err(reason),
            }
            if !self.registered && self.session.is_connected() {
                self.register();
            }
        }
        Ok(())
    }

    fn register(&mut self) {
        self.registered = true;
        self.shared.table.write().register(
            self.sid,
            SessionHandle {
                tx: self.tx.clone(),
                kill: Arc::clone(&self.kill),
            },
        );
        let client_id = self.session.client_id().to_owned();
        let previous = self
            .shared
            .client_ids
            .lock()
            .insert(client_id.clone(), (self.sid, Arc::clone(&self.kill)));
        if let Some((old, kill)) = previous {
            log::info!("client `{client_id}` reconnected; closing session {old}");
            kill.notify_one();
        }
        log::info!("session {} connected as `{client_id}`", self.sid);
    }

    fn handle_bytes(&mut self, buf: &mut BytesMut) -> Result<(), CloseReason> {
        let max = self.shared.config.max_payload + 2 + usize::from(u16::MAX) + 2;
        loop {
            match decode_packet_limited(buf, max) {
                Ok((packet, used)) => {
                    buf.advance(used);
                    if let super::codec::Packet::Publish(p) = &packet {
                        if p.payload.len() > self.shared.config.max_payload {
                            log::warn!("session {}: payload too large", self.sid);
                            return Err(CloseReason::Protocol);
                        }
                    }
                    let actions = self
                        .session
                        .handle_packet(packet, Instant::now())
                        .map_err(|e| {
                            log::warn!("session {}: {e}", self.sid);
                            CloseReason::Protocol
                        })?;
                    self.execute(actions)?;
                }
                Err(CodecError::Truncated) => return Ok(()),
                Err(e) => {
                    log::warn!("session {}: {e}", self.sid);
                    return Err(CloseReason::Protocol);
                }
            }
        }
    }

    fn deliver(&mut self, d: Delivery) -> Result<(), CloseReason> {
        match self
            .session
            .deliver(d.topic, d.payload, d.qos, d.ack, Instant::now())
        {
            Some(p) => {
                encode_into(&p, &mut self.out);
                Ok(())
            }
            None => Err(CloseReason::SlowSubscriber),
        }
    }

    fn on_tick(&mut self) -> Result<(), CloseReason> {
        let now = Instant::now();
        if !self.session.is_connected() {
            return Ok(());
        }
        if self.session.keep_alive_expired(now) {
            return Err(CloseReason::KeepAliveExpired);
        }
        for p in self.session.due_retransmits(now) {
            encode_into(&p, &mut self.out);
        }
        Ok(())
    }

    fn cleanup(&mut self) {
        if !self.registered {
            return;
        }
        self.shared.table.write().remove(self.sid);
        let mut ids = self.shared.client_ids.lock();
        if ids
            .get(self.session.client_id())
            .is_some_and(|(sid, _)| *sid == self.sid)
        {
            ids.remove(self.session.client_id());
        }
    }
}

async fn run_connection(shared: Arc<Shared>, stream: TcpStream, sid: SessionId) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::channel(shared.config.outbound_queue);
    let (ctl_tx, mut ctl_rx) = mpsc::unbounded_channel();
    let session =
        Session::new(Instant::now()).with_retransmit_initial(shared.config.retransmit_initial);
    let mut conn = Conn {
        shared,
        sid,
        session,
        tx,
        kill: Arc::new(Notify::new()),
        ctl_tx,
        out: Vec::with_capacity(8192),
        registered: false,
    };
    let kill = Arc::clone(&conn.kill);
    let mut buf = BytesMut::with_capacity(16 * 1024);
    let mut tick = tokio::time::interval(TICK);
    let connect_deadline = tokio::time::Instant::now() + CONNECT_TIMEOUT;

    let reason: Result<(), CloseReason> = loop {
        let step = tokio::select! {
            read = rd.read_buf(&mut buf) => match read {
                Ok(0) => break Ok(()),
                Ok(_) => conn.handle_bytes(&mut buf),
                Err(e) => {
                    log::debug!("session {sid}: read error {e}");
                    break Ok(());
                }
            },
            Some(d) = rx.recv() => {
                let mut r = conn.deliver(d);
                while r.is_ok() {
                    match rx.try_recv() {
                        Ok(d) => r = conn.deliver(d),
                        Err(_) => break,
                    }
                }
                r
            },
            Some(Control::Settled { packet_id, ok }) = ctl_rx.recv() => {
                let actions = conn.session.inbound_settled(packet_id, ok);
                conn.execute(actions)
            },
            _ = kill.notified() => Err(CloseReason::SlowSubscriber),
            _ = tick.tick() => {
                if !conn.session.is_connected() && tokio::time::Instant::now() > connect_deadline {
                    Err(CloseReason::Protocol)
                } else {
                    conn.on_tick()
                }
            },
        };
        if !conn.out.is_empty() {
            if let Err(e) = wr.write_all(&conn.out).await {
                log::debug!("session {sid}: write error {e}");
                break Ok(());
            }
            conn.out.clear();
        }
        if let Err(reason) = step {
            break Err(reason);
        }
    };
    match reason {
        Ok(()) | Err(CloseReason::ClientDisconnect) => log::debug!("session {sid} closed"),
        Err(r) => log::info!("session {sid} closed: {r:?}"),
    }
    conn.cleanup();
}

/// Exposed for diagnostics and tests: whether any live session would
/// receive a message on `topic`.
pub fn has_subscriber(handle: &BrokerHandle, topic: &TopicName) -> bool {
    let table = handle.shared.table.read();
    !table.route_publish(topic).is_empty()
}

