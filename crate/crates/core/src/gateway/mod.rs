//! HTTP query API and tick stream.
//!
//! All endpoints are read-only. `/api/stream` carries `tick` events with no
//! data; clients re-run their query when one arrives.

pub mod params;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::io;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::header::{HeaderValue, CACHE_CONTROL};
use axum::http::{Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDate;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};
use tokio::time::{interval_at, Instant, MissedTickBehavior};
use tokio_stream::wrappers::BroadcastStream;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::model::UseCase;
use crate::store::{InvalidSpec, QueryError, Store};
use params::Params;

pub const DEFAULT_PORT: u16 = 8080;
pub const TRAFFIC_TICK: Duration = Duration::from_secs(60);
pub const LIGHTING_TICK: Duration = Duration::from_secs(30);

/// Fan-out of tick notifications to every connected stream.
#[derive(Debug, Clone)]
pub struct TickHub {
    tx: broadcast::Sender<UseCase>,
}

impl Default for TickHub {
    fn default() -> Self {
        TickHub::new()
    }
}

impl TickHub {
    pub fn new() -> Self {
        TickHub {
            tx: broadcast::channel(256).0,
        }
    }

    pub fn notify(&self, use_case: UseCase) {
        // No receivers is fine.
        let _ = self.tx.send(use_case);
    }

    pub fn subscribe(&self) -> broadcast::Receiver<UseCase> {
        self.tx.subscribe()
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
    pub traffic_tick: Duration,
    pub lighting_tick: Duration,
    /// use case → sensor id → display label.
    pub labels: BTreeMap<UseCase, BTreeMap<String, String>>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            cors_origin: None,
            traffic_tick: TRAFFIC_TICK,
            lighting_tick: LIGHTING_TICK,
            labels: BTreeMap::new(),
        }
    }
}

pub struct Gateway {
    store: Arc<Store>,
    ticks: TickHub,
    config: GatewayConfig,
    shutdown: watch::Receiver<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    /// `invalid_spec`, `unknown_sensor` or `internal`.
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    pub message: String,
}

impl ApiError {
    fn invalid(e: InvalidSpec) -> Self {
        ApiError {
            status: 400,
            code: "invalid_spec".into(),
            message: e.to_string(),
            param: Some(e.param),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: 500,
            code: "internal".into(),
            param: None,
            message: message.into(),
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::InvalidSpec(s) => ApiError::invalid(s),
            QueryError::UnknownSensor(ref s) => ApiError {
                status: 404,
                code: "unknown_sensor".into(),
                param: Some("sensors".into()),
                message: format!("no data for sensor `{s}`"),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseCaseMeta {
    pub sensors: Vec<SensorMeta>,
    pub date_min: Option<NaiveDate>,
    pub date_max: Option<NaiveDate>,
    pub tick_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub traffic: UseCaseMeta,
    pub lighting: UseCaseMeta,
    pub power_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tick {
    pub use_case: UseCase,
}

type Shared = Arc<Gateway>;

fn query_params(q: Result<Query<Params>, QueryRejection>) -> Result<Params, ApiError> {
    q.map(|Query(p)| p)
        .map_err(|e| ApiError::invalid(InvalidSpec::new("query", e.body_text())))
}

/// Runs a store query off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

impl Gateway {
    pub fn new(store: Arc<Store>, ticks: TickHub, config: GatewayConfig, shutdown: watch::Receiver<bool>) -> Self {
        Gateway {
            store,
            ticks,
            config,
            shutdown,
        }
    }

    pub fn meta(&self) -> Meta {
        let use_case = |uc: UseCase, tick: Duration| {
            let labels = self.config.labels.get(&uc);
            let sensors = self
                .store
                .sensors(uc)
                .into_iter()
                .map(|id| SensorMeta {
                    label: labels.and_then(|l| l.get(&id)).cloned().unwrap_or_else(|| id.clone()),
                    id,
                })
                .collect();
            let bounds = self.store.date_bounds(uc);
            UseCaseMeta {
                sensors,
                date_min: bounds.map(|b| b.0),
                date_max: bounds.map(|b| b.1),
                tick_seconds: tick.as_secs(),
            }
        };
        Meta {
            traffic: use_case(UseCase::Traffic, self.config.traffic_tick),
            lighting: use_case(UseCase::Lighting, self.config.lighting_tick),
            power_w: self.store.power_w(),
        }
    }

    fn router(self: Arc<Self>) -> Router {
        let origin = match &self.config.cors_origin {
            Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| {
                log::warn!("ignoring unusable CORS origin {o:?}");
                AllowOrigin::any()
            }),
            None => AllowOrigin::any(),
        };
        let cors = CorsLayer::new().allow_origin(origin).allow_methods([Method::GET]);
        Router::new()
            .route("/api/meta", get(meta))
            .route("/api/traffic/series", get(traffic_series))
            .route("/api/lighting/energy", get(lighting_energy))
            .route("/api/lighting/total", get(lighting_total))
            .route("/api/stream", get(stream))
            .layer(axum::middleware::map_response(no_store))
            .layer(cors)
            .with_state(self)
    }

    fn spawn_timers(&self) {
        for (use_case, period) in [
            (UseCase::Traffic, self.config.traffic_tick),
            (UseCase::Lighting, self.config.lighting_tick),
        ] {
            let hub = self.ticks.clone();
            let mut shutdown = self.shutdown.clone();
            tokio::spawn(async move {
                let mut timer = interval_at(Instant::now() + period, period);
                timer.set_missed_tick_behavior(MissedTickBehavior::Delay);
                loop {
                    tokio::select! {
                        _ = timer.tick() => hub.notify(use_case),
                        _ = shutdown.wait_for(|s| *s) => break,
                    }
                }
            });
        }
    }

    /// Serves until the shutdown signal flips. Open tick streams are closed
    /// so shutdown does not wait on them.
    pub async fn run(self, listener: TcpListener) -> io::Result<()> {
        let gw = Arc::new(self);
        gw.spawn_timers();
        let mut shutdown = gw.shutdown.clone();
        log::info!("gateway listening on {}", listener.local_addr()?);
        axum::serve(listener, gw.router())
            .with_graceful_shutdown(async move {
                let _ = shutdown.wait_for(|s| *s).await;
            })
            .await
    }
}

async fn no_store(mut res: Response) -> Response {
    res.headers_mut()
        .insert(CACHE_CONTROL, HeaderValue::from_static("no-store"));
    res
}

async fn meta(State(gw): State<Shared>) -> Json<Meta> {
    Json(gw.meta())
}

async fn traffic_series(State(gw): State<Shared>, q: Result<Query<Params>, QueryRejection>) -> Result<Response, ApiError> {
    let spec = params::traffic_spec(query_params(q)?).map_err(ApiError::invalid)?;
    let result = blocking(move || Ok(gw.store.query_traffic(&spec)?)).await?;
    Ok(Json(result).into_response())
}

async fn lighting_energy(State(gw): State<Shared>, q: Result<Query<Params>, QueryRejection>) -> Result<Response, ApiError> {
    let spec = params::energy_spec(query_params(q)?).map_err(ApiError::invalid)?;
    let result = blocking(move || Ok(gw.store.query_energy(&spec)?)).await?;
    Ok(Json(result).into_response())
}

async fn lighting_total(State(gw): State<Shared>, q: Result<Query<Params>, QueryRejection>) -> Result<Response, ApiError> {
    let p = params::total_params(query_params(q)?).map_err(ApiError::invalid)?;
    let result = blocking(move || {
        gw.store
            .query_energy_total(&p.sensor, p.date, p.hour_from, p.hour_to)
            .map_err(|e| match e {
                QueryError::UnknownSensor(_) => ApiError {
                    param: Some("sensor".into()),
                    ..e.into()
                },
                other => other.into(),
            })
    })
    .await?;
    Ok(Json(result).into_response())
}

async fn stream(State(gw): State<Shared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let mut shutdown = gw.shutdown.clone();
    let ticks = BroadcastStream::new(gw.ticks.subscribe())
        .filter_map(|t| async move { t.ok() })
        .map(|use_case| {
            let data = serde_json::to_string(&Tick { use_case }).expect("tick serializes");
            Ok(Event::default().event("tick").data(data))
        })
        .take_until(async move {
            let _ = shutdown.wait_for(|s| *s).await;
        });
    Sse::new(ticks).keep_alive(KeepAlive::default())
}
