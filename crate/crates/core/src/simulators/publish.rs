//! Turning simulator output into MQTT publishes, either as a paced or
//! unpaced backfill over a historical window or live against the clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, DurationRound, Utc};
use tokio::sync::watch;
use tokio::time::Instant;

use super::config::{LightingSimConfig, TrafficSimConfig};
use super::lighting::{lighting_events, lighting_step, LightState};
use super::traffic::traffic_tick;
use crate::broker::codec::QoS;
use crate::broker::topic::TopicName;
use crate::client::{ClientError, MqttClient};
use crate::model::{encode_lighting, encode_traffic};

pub fn traffic_topic(sensor_id: &str) -> TopicName {
    TopicName::new(format!("city/traffic/{sensor_id}")).expect("sensor ids are topic-safe")
}

pub fn lighting_topic(sensor_id: &str) -> TopicName {
    TopicName::new(format!("building/lighting/{sensor_id}")).expect("sensor ids are topic-safe")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: TopicName,
    pub payload: Vec<u8>,
    /// Simulated time the message describes.
    pub ts: DateTime<Utc>,
}

/// Readings for every sensor and every minute in `[from, to)`, minute-major
/// in sensor order.
pub fn traffic_messages(config: &TrafficSimConfig, from: DateTime<Utc>, to: DateTime<Utc>) -> Vec<Message> {
    let mut out = Vec::new();
    let mut minute = floor_minute(from);
    while minute < to {
        for s in &config.sensors {
            out.push(traffic_message(config, &s.id, minute));
        }
        minute += Duration::minutes(1);
    }
    out
}

fn traffic_message(config: &TrafficSimConfig, sensor: &str, minute: DateTime<Utc>) -> Message {
    let reading = traffic_tick(config, sensor, minute);
    Message {
        topic: traffic_topic(sensor),
        payload: encode_traffic(&reading),
        ts: minute,
    }
}

/// Events for every location over `[from, to)` in time order; ties keep
/// location order.
pub fn lighting_messages(config: &LightingSimConfig, from: DateTime<Utc>, to: DateTime<Utc>) -> Vec<Message> {
    let mut out: Vec<Message> = config
        .locations
        .iter()
        .flat_map(|loc| {
            lighting_events(config, &loc.id, from, to).into_iter().map(|e| Message {
                topic: lighting_topic(&e.sensor_id),
                payload: encode_lighting(&e),
                ts: e.ts,
            })
        })
        .collect();
    out.sort_by_key(|m| m.ts);
    out
}

fn floor_minute(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.duration_trunc(Duration::minutes(1)).expect("in range")
}

fn ceil_minute(ts: DateTime<Utc>) -> DateTime<Utc> {
    let f = floor_minute(ts);
    if f == ts {
        f
    } else {
        f + Duration::minutes(1)
    }
}

#[derive(Debug, Default)]
pub struct PublishStats {
    pub published: AtomicU64,
    pub acked: AtomicU64,
}

/// Destination for simulator output.
pub trait Sink {
    fn send(&self, msg: Message) -> impl std::future::Future<Output = Result<(), ClientError>> + Send;
}

/// Publishes at QoS 1 and counts broker acknowledgements in the
/// background.
pub struct MqttSink {
    pub client: MqttClient,
    pub stats: Arc<PublishStats>,
}

impl Sink for MqttSink {
    async fn send(&self, msg: Message) -> Result<(), ClientError> {
        let ack = self
            .client
            .publish(msg.topic, msg.payload, QoS::AtLeastOnce)
            .await?;
        self.stats.published.fetch_add(1, Ordering::Relaxed);
        let stats = Arc::clone(&self.stats);
        tokio::spawn(async move {
            if ack.wait().await.is_ok() {
                stats.acked.fetch_add(1, Ordering::Relaxed);
            }
        });
        Ok(())
    }
}

/// Wall clock anchored at a chosen UTC instant. Tests anchor it in the past
/// and drive it with tokio's paused time.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    base_utc: DateTime<Utc>,
    base: Instant,
}

impl Clock {
    pub fn system() -> Self {
        Clock::anchored(Utc::now())
    }

    pub fn anchored(at: DateTime<Utc>) -> Self {
        Clock {
            base_utc: at,
            base: Instant::now(),
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        let elapsed = Instant::now() - self.base;
        self.base_utc + Duration::from_std(elapsed).expect("elapsed fits")
    }

    fn instant_at(&self, ts: DateTime<Utc>) -> Instant {
        let offset = (ts - self.base_utc).to_std().unwrap_or_default();
        self.base + offset
    }
}

async fn stopped(shutdown: &mut watch::Receiver<bool>) {
    let _ = shutdown.wait_for(|s| *s).await;
}

/// Sends `messages` in order. With a speedup, a message stamped `ts` goes
/// out `(ts - from) / speedup` after the call; without one, as fast as the
/// sink accepts. Returns the number sent before shutdown.
pub async fn run_backfill<S: Sink>(
    sink: &S,
    messages: Vec<Message>,
    from: DateTime<Utc>,
    speedup: Option<f64>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<u64, ClientError> {
    let start = Instant::now();
    let mut sent = 0;
    for msg in messages {
        if *shutdown.borrow() {
            break;
        }
        if let Some(speedup) = speedup.filter(|s| *s > 0.0) {
            let sim = (msg.ts - from).to_std().unwrap_or_default();
            let due = start + StdDuration::from_secs_f64(sim.as_secs_f64() / speedup);
            tokio::select! {
                _ = tokio::time::sleep_until(due) => {}
                _ = stopped(&mut shutdown) => break,
            }
        }
        sink.send(msg).await?;
        sent += 1;
    }
    Ok(sent)
}

/// Publishes each sensor's reading for minute M once the clock reaches
/// M + 1 min, starting with the first full minute after the call.
pub async fn run_traffic_live<S: Sink>(
    sink: &S,
    config: &TrafficSimConfig,
    clock: Clock,
    mut shutdown: watch::Receiver<bool>,
) -> Result<u64, ClientError> {
    let mut minute = ceil_minute(clock.now());
    let mut sent = 0;
    loop {
        let due = clock.instant_at(minute + Duration::minutes(1));
        tokio::select! {
            _ = tokio::time::sleep_until(due) => {}
            _ = stopped(&mut shutdown) => return Ok(sent),
        }
        for s in &config.sensors {
            sink.send(traffic_message(config, &s.id, minute)).await?;
            sent += 1;
        }
        minute += Duration::minutes(1);
    }
}

/// Steps every location's controller once per second of clock time,
/// starting at the next full minute.
pub async fn run_lighting_live<S: Sink>(
    sink: &S,
    config: &LightingSimConfig,
    clock: Clock,
    mut shutdown: watch::Receiver<bool>,
) -> Result<u64, ClientError> {
    let start = ceil_minute(clock.now());
    let mut states: Vec<LightState> = config
        .locations
        .iter()
        .map(|l| LightState::new(&l.id, start))
        .collect();
    let mut sent = 0;
    let mut now = start;
    loop {
        now += Duration::seconds(1);
        tokio::select! {
            _ = tokio::time::sleep_until(clock.instant_at(now)) => {}
            _ = stopped(&mut shutdown) => return Ok(sent),
        }
        let mut batch: Vec<Message> = states
            .iter_mut()
            .flat_map(|state| lighting_step(config, state, now))
            .map(|e| Message {
                topic: lighting_topic(&e.sensor_id),
                payload: encode_lighting(&e),
                ts: e.ts,
            })
            .collect();
        batch.sort_by_key(|m| m.ts);
        for msg in batch {
            sink.send(msg).await?;
            sent += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::config::SensorSpec;
    use parking_lot::Mutex;

    #[derive(Default)]
    struct Collect(Mutex<Vec<Message>>);

    impl Sink for Collect {
        async fn send(&self, msg: Message) -> Result<(), ClientError> {
            self.0.lock().push(msg);
            Ok(())
        }
    }

    fn ts(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    fn traffic() -> TrafficSimConfig {
        TrafficSimConfig::with_defaults(
            42,
            vec![SensorSpec::new("S01", "North"), SensorSpec::new("S02", "South")],
        )
    }

    fn lighting() -> LightingSimConfig {
        let mut c = LightingSimConfig::with_defaults(
            7,
            vec![SensorSpec::new("R1", ""), SensorSpec::new("R2", "")],
        );
        c.motion_rate_profile = [40.0; 24];
        c
    }

    #[test]
    fn backfill_counts_and_topics() {
        let from = ts("2017-03-01T08:00:00Z");
        let msgs = traffic_messages(&traffic(), from, from + Duration::minutes(60));
        assert_eq!(msgs.len(), 120);
        assert_eq!(msgs[0].topic.as_str(), "city/traffic/S01");
        assert_eq!(msgs[1].topic.as_str(), "city/traffic/S02");
        assert_eq!(msgs, traffic_messages(&traffic(), from, from + Duration::minutes(60)));
    }

    fn sorted(mut v: Vec<Message>) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = v.drain(..).map(|m| (m.topic.to_string(), m.payload)).collect();
        out.sort();
        out
    }

    #[tokio::test(start_paused = true)]
    async fn traffic_live_matches_backfill() {
        let from = ts("2017-03-01T08:00:00Z");
        let clock = Clock::anchored(from);
        let (tx, rx) = watch::channel(false);
        let sink = Collect::default();
        let config = traffic();
        let run = run_traffic_live(&sink, &config, clock, rx);
        let stop = async {
            tokio::time::sleep(StdDuration::from_secs(10 * 60 + 30)).await;
            tx.send(true).unwrap();
        };
        let (sent, ()) = tokio::join!(run, stop);
        assert_eq!(sent.unwrap(), 20);
        let live = std::mem::take(&mut *sink.0.lock());
        assert_eq!(sorted(live), sorted(traffic_messages(&config, from, from + Duration::minutes(10))));
    }

    #[tokio::test(start_paused = true)]
    async fn lighting_live_matches_backfill() {
        let from = ts("2017-03-01T08:00:00Z");
        let clock = Clock::anchored(from);
        let (tx, rx) = watch::channel(false);
        let sink = Collect::default();
        let config = lighting();
        let run = run_lighting_live(&sink, &config, clock, rx);
        let stop = async {
            tokio::time::sleep(StdDuration::from_secs(30 * 60) + StdDuration::from_millis(500)).await;
            tx.send(true).unwrap();
        };
        let (_, ()) = tokio::join!(run, stop);
        let live = std::mem::take(&mut *sink.0.lock());
        let expected = lighting_messages(&config, from, from + Duration::minutes(30));
        assert!(!expected.is_empty());
        assert_eq!(sorted(live), sorted(expected));
    }

    #[tokio::test(start_paused = true)]
    async fn paced_backfill_honours_speedup() {
        let from = ts("2017-03-01T08:00:00Z");
        let msgs = traffic_messages(&traffic(), from, from + Duration::minutes(10));
        let sink = Collect::default();
        let (_tx, rx) = watch::channel(false);
        let start = Instant::now();
        let sent = run_backfill(&sink, msgs, from, Some(60.0), rx).await.unwrap();
        assert_eq!(sent, 20);
        // Last minute stamp is 9 simulated minutes in: 9 s at 60x.
        assert_eq!(Instant::now() - start, StdDuration::from_secs(9));
    }
}
