//! HTTP front end for the recommender engine.
//!
//! Every mutation is checked against the engine, appended to the event log
//! (fsynced) and only then applied and acknowledged. Reads take a shared
//! lock and never touch the log.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

use ontorec::binning::{bin_item, BinningConfig, BinningOutcome, VectorTable};
use ontorec::context::{GeoPoint, Weather};
use ontorec::demographic::UserRecord;
use ontorec::engine::{Engine, EngineConfig, Event, RequestContext};
use ontorec::eventlog::{restore, EventLog, Snapshot};
use ontorec::ontology::{ItemRecord, OntologyGraph};
use ontorec::preferences::{FeedbackEvent, FeedbackKind};
use ontorec::{Error, ItemId, Recommendation, UserId};

pub const API_KEY_HEADER: &str = "x-api-key";

/// Service settings. Every field can come from a JSON file and be
/// overridden by `ONTOREC_*` environment variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    /// Event log file; without one the service runs in memory.
    pub log_path: Option<PathBuf>,
    pub snapshot_path: Option<PathBuf>,
    /// Write a snapshot after this many events (0 disables).
    pub snapshot_every: u64,
    pub api_key: Option<String>,
    pub engine: EngineConfig,
    pub binning: BinningConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            log_path: None,
            snapshot_path: None,
            snapshot_every: 1000,
            api_key: None,
            engine: EngineConfig::default(),
            binning: BinningConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<ServiceConfig, Error> {
        let cfg: ServiceConfig = serde_json::from_str(text)?;
        cfg.engine.validate()?;
        BinningConfig::new(cfg.binning.threshold)?;
        Ok(cfg)
    }

    /// Applies `ONTOREC_ADDR`, `ONTOREC_LOG`, `ONTOREC_SNAPSHOT` and
    /// `ONTOREC_API_KEY`.
    pub fn with_env(mut self) -> Result<ServiceConfig, Error> {
        if let Ok(addr) = std::env::var("ONTOREC_ADDR") {
            self.addr = addr
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("ONTOREC_ADDR `{addr}` is not host:port")))?;
        }
        if let Ok(p) = std::env::var("ONTOREC_LOG") {
            self.log_path = Some(p.into());
        }
        if let Ok(p) = std::env::var("ONTOREC_SNAPSHOT") {
            self.snapshot_path = Some(p.into());
        }
        if let Ok(k) = std::env::var("ONTOREC_API_KEY") {
            self.api_key = Some(k);
        }
        Ok(self)
    }
}

struct Inner {
    engine: Engine,
    log: Option<EventLog>,
    since_snapshot: u64,
}

pub struct AppState {
    inner: RwLock<Inner>,
    config: ServiceConfig,
    vectors: VectorTable,
}

pub type SharedState = Arc<AppState>;

fn now_secs() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64)
}

impl AppState {
    /// Restores the engine from the snapshot and log named in `config`.
    pub fn open(graph: OntologyGraph, config: ServiceConfig) -> Result<SharedState, Error> {
        let snapshot = match &config.snapshot_path {
            Some(p) if p.exists() => Some(Snapshot::read(p)?),
            _ => None,
        };
        let (log, records) = match &config.log_path {
            Some(p) => {
                let (log, records) = EventLog::open(p)?;
                (Some(log), records)
            }
            None => (None, Vec::new()),
        };
        let engine = restore(graph, config.engine.clone(), snapshot, &records)?;
        Ok(Arc::new(AppState {
            inner: RwLock::new(Inner { engine, log, since_snapshot: 0 }),
            config,
            vectors: VectorTable::bundled(),
        }))
    }

    /// Checks, logs, then applies. The log write is the durability point.
    async fn commit(&self, event: Event, timestamp: i64) -> Result<(), ApiError> {
        let mut inner = self.inner.write().await;
        inner.engine.check(&event)?;
        if let Some(log) = inner.log.as_mut() {
            log.append(event.clone(), timestamp)?;
        }
        inner.engine.apply(&event).map_err(ApiError::invariant)?;
        inner.since_snapshot += 1;
        if self.config.snapshot_every > 0 && inner.since_snapshot >= self.config.snapshot_every {
            if let (Some(path), Some(log)) = (&self.config.snapshot_path, &inner.log) {
                Snapshot::capture(&inner.engine, log.next_seq() - 1)?.write(path)?;
                inner.since_snapshot = 0;
            }
        }
        Ok(())
    }

    /// Writes a snapshot at the current log position.
    pub async fn snapshot(&self, path: &Path) -> Result<(), Error> {
        let inner = self.inner.read().await;
        let hw = inner.log.as_ref().map_or(inner.engine.state().events_applied, |l| l.next_seq() - 1);
        Snapshot::capture(&inner.engine, hw)?.write(path)
    }

    /// Serialized engine state, for replay comparisons.
    pub async fn state_json(&self) -> String {
        serde_json::to_string(self.inner.read().await.engine.state()).unwrap_or_default()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    /// An event passed `check` but failed to apply: the log and the engine
    /// now disagree.
    fn invariant(e: Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("event logged but not applied: {e}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownUser(_) | Error::UnknownItem(_) => StatusCode::NOT_FOUND,
            Error::Duplicate { .. } => StatusCode::CONFLICT,
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::UnknownClass(_)
            | Error::OrphanClass(_)
            | Error::Undefined(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Parse { .. } | Error::FfmParse { .. } | Error::Json(_) | Error::Csv(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Malformed bodies are 400; well-formed but invalid ones are 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn require_key(State(state): State<SharedState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(key) = &state.config.api_key {
        if headers.get(API_KEY_HEADER).and_then(|v| v.to_str().ok()) != Some(key.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong API key").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/users", post(create_user))
        .route("/users/{id}/preferences", put(set_preferences))
        .route("/users/{id}/recommendations", get(recommendations))
        .route("/users/{id}/feedback", post(feedback))
        .route("/users/{id}/ratings", post(rating))
        .route("/users/{id}/profile", get(profile))
        .route("/admin/items", post(add_item))
        .route("/admin/items/bin", post(preview_binning))
        .route("/admin/phase", get(phase))
        .route("/admin/metrics", get(metrics))
        .layer(middleware::from_fn_with_state(state.clone(), require_key))
        .with_state(state)
}

/// Binds `config.addr` and serves until ctrl-c.
pub async fn serve(state: SharedState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(state.config.addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Deserialize)]
struct NewUser {
    id: Option<u32>,
    /// Age bin code 1-5 or age in years.
    age: u32,
    ac_deg: u8,
    budget: u8,
    accom: u8,
    gender: String,
    job: String,
    region: String,
    group_comp: String,
    #[serde(default)]
    selection: Option<Selection>,
}

/// HL interests either as a binary vector in class order or as labels.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Selection {
    Vector(Vec<f64>),
    Classes(Vec<String>),
}

impl Selection {
    fn resolve(self, engine: &Engine) -> ApiResult<Vec<f64>> {
        match self {
            Selection::Vector(v) => Ok(v),
            Selection::Classes(names) => {
                let labels = &engine.matrices().hl_labels;
                for n in &names {
                    if !labels.contains(n) {
                        return Err(Error::UnknownClass(n.clone()).into());
                    }
                }
                Ok(labels.iter().map(|l| f64::from(names.contains(l))).collect())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct PreferencesBody {
    selection: Selection,
}

async fn create_user(State(state): State<SharedState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewUser = parse_body(&body)?;
    let (id, selection) = {
        let inner = state.inner.read().await;
        let id = req
            .id
            .unwrap_or_else(|| inner.engine.state().users.keys().next_back().map_or(0, |u| u.0 + 1));
        let selection = req.selection.map(|s| s.resolve(&inner.engine)).transpose()?;
        (id, selection)
    };
    let user = UserRecord::new(
        id, req.age, req.ac_deg, req.budget, req.accom, &req.gender, &req.job, &req.region, &req.group_comp,
    )?;
    state.commit(Event::UserCreated { user, selection }, now_secs()).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn set_preferences(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<u32>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: PreferencesBody = parse_body(&body)?;
    let selection = req.selection.resolve(&state.inner.read().await.engine)?;
    state.commit(Event::PreferencesSet { user: UserId(id), selection }, now_secs()).await?;
    let inner = state.inner.read().await;
    Ok(Json(inner.engine.profile(UserId(id))?))
}

#[derive(Debug, Deserialize)]
struct RecQuery {
    n: Option<usize>,
    weather: Option<Weather>,
    lat: Option<f64>,
    lon: Option<f64>,
    /// Request time in unix seconds; defaults to the wall clock.
    now: Option<i64>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RecPage {
    user: UserId,
    phase: u8,
    total: usize,
    offset: usize,
    limit: usize,
    items: Vec<Recommendation>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostic: Option<String>,
}

const MAX_LIST: usize = 500;

async fn recommendations(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<u32>,
    query: Result<Query<RecQuery>, QueryRejection>,
) -> ApiResult<Json<RecPage>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let n = q.n.unwrap_or(5);
    if n == 0 || n > MAX_LIST {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("n must be in 1..={MAX_LIST}")));
    }
    let hotel = match (q.lat, q.lon) {
        (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon)?),
        (None, None) => None,
        _ => return Err(ApiError::bad_request("lat and lon must be given together")),
    };
    let ctx = RequestContext { hotel, weather: q.weather, now: q.now.unwrap_or_else(now_secs) };
    let inner = state.inner.read().await;
    let list = inner.engine.recommend(UserId(id), &ctx, n)?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(n);
    Ok(Json(RecPage {
        user: UserId(id),
        phase: inner.engine.state().phase,
        total: list.items.len(),
        offset,
        limit,
        items: list.items.into_iter().skip(offset).take(limit).collect(),
        fallback: list.fallback,
        diagnostic: list.diagnostic,
    }))
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    item: u32,
    kind: FeedbackKind,
    rating: Option<f64>,
    timestamp: Option<i64>,
}

async fn feedback(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<u32>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: FeedbackBody = parse_body(&body)?;
    let ts = req.timestamp.unwrap_or_else(now_secs);
    let event = FeedbackEvent {
        rating: req.rating,
        timestamp: ts,
        ..FeedbackEvent::new(UserId(id), ItemId(req.item), req.kind)
    };
    state.commit(Event::Feedback { event }, ts).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    item: u32,
    rating: f64,
    timestamp: Option<i64>,
}

async fn rating(State(state): State<SharedState>, UrlPath(id): UrlPath<u32>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: RatingBody = parse_body(&body)?;
    let ts = req.timestamp.unwrap_or_else(now_secs);
    let event = Event::Rating { user: UserId(id), item: ItemId(req.item), rating: req.rating, timestamp: ts };
    state.commit(event, ts).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn profile(State(state): State<SharedState>, UrlPath(id): UrlPath<u32>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.inner.read().await.engine.profile(UserId(id))?))
}

fn bin(state: &AppState, engine: &Engine, item: &ItemRecord) -> ApiResult<BinningOutcome> {
    Ok(bin_item(item, engine.graph(), &state.vectors, &state.config.binning)?)
}

/// Adds an item. Items without categories are binned and the resulting
/// links are logged with the event.
async fn add_item(State(state): State<SharedState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let item: ItemRecord = parse_body(&body)?;
    let (links, diagnostic) = if item.categories.is_some() {
        (None, None)
    } else {
        let out = bin(&state, &state.inner.read().await.engine, &item)?;
        (Some(out.links), out.diagnostic)
    };
    let id = item.id;
    state.commit(Event::ItemAdded { item, links }, now_secs()).await?;
    let inner = state.inner.read().await;
    let classes = inner.engine.graph().links(id).to_vec();
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "links": classes, "diagnostic": diagnostic }))))
}

async fn preview_binning(State(state): State<SharedState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let item: ItemRecord = parse_body(&body)?;
    let inner = state.inner.read().await;
    Ok(Json(bin(&state, &inner.engine, &item)?))
}

async fn phase(State(state): State<SharedState>) -> impl IntoResponse {
    let inner = state.inner.read().await;
    let m = inner.engine.maturity();
    let weights: serde_json::Map<String, serde_json::Value> =
        inner.engine.weights().into_iter().map(|(k, w)| (k.label().to_lowercase(), json!(w))).collect();
    Json(json!({
        "phase": m.phase,
        "users": m.user_count,
        "ratings": m.rating_count,
        "items": m.item_count,
        "density": m.density(),
        "weights": weights,
    }))
}

async fn metrics(State(state): State<SharedState>) -> impl IntoResponse {
    let inner = state.inner.read().await;
    let s = inner.engine.state();
    Json(json!({
        "events_applied": s.events_applied,
        "log_next_seq": inner.log.as_ref().map(|l| l.next_seq()),
        "users": s.users.len(),
        "ratings": s.rating_count,
        "items": s.graph.items().len(),
        "phase": s.phase,
        "clusters": s.cluster.as_ref().map(|c| c.k),
        "ffm_trained": s.ffm.is_some(),
        "clustered_at_users": s.clustered_at_users,
        "trained_at_ratings": s.trained_at_ratings,
    }))
}
