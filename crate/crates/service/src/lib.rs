//! HTTP API over the harmonization pipeline.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /api/harmonize` | multipart `composite`, `fg_mask`, optional `guide_mask`, optional `session` | PNG |
//! | `POST /api/color_transfer` | as above plus `r1`, `r2` | PNG |
//! | `GET /api/health` | | JSON |
//! | `POST /api/sessions` | multipart `composite` | JSON |
//! | `GET /api/sessions/{id}` | | JSON |
//! | `GET /api/sessions/{id}/result` | | PNG |
//! | `DELETE /api/sessions/{id}` | | 204 |
//!
//! Images are PNG or JPEG; masks are 8-bit single-channel PNGs with 255 for
//! selected pixels. Successful PNG replies carry an `x-iharmon-info` header
//! holding `{"latency_ms": .., "used_default_reference": ..}`.
//!
//! When a `session` field is given the stored composite is used, and masks
//! that are not posted fall back to the ones last posted in that session.

pub mod error;
pub mod session;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iharmon_core::inference::{color_transfer, harmonize, BlendRatios, HarmonizeOutput, HarmonizeRequest};
use iharmon_core::model::{IphModel, ModelConfig};
use iharmon_core::{io, Image, Mask};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

pub use error::ApiError;
pub use session::{SessionRecord, SessionStore};

pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;
pub const MAX_DIMENSION: usize = 4096;
pub const INFO_HEADER: &str = "x-iharmon-info";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Concurrent inference jobs.
    pub workers: usize,
    pub max_body_bytes: usize,
    pub max_dimension: usize,
    pub session_idle: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            max_body_bytes: MAX_BODY_BYTES,
            max_dimension: MAX_DIMENSION,
            session_idle: Duration::from_secs(30 * 60),
        }
    }
}

#[derive(Debug)]
pub struct LoadedModel {
    pub model: IphModel,
    pub config_hash: String,
}

impl LoadedModel {
    pub fn new(model: IphModel) -> Self {
        let config_hash = model.config().hash();
        Self { model, config_hash }
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> iharmon_core::Result<Self> {
        let (model, meta) = IphModel::load(path, expected)?;
        Ok(Self {
            model,
            config_hash: meta.config_hash,
        })
    }
}

#[derive(Debug)]
pub struct AppState {
    config: ServiceConfig,
    harmonizer: Option<Arc<LoadedModel>>,
    color: Option<Arc<LoadedModel>>,
    workers: Arc<Semaphore>,
    sessions: SessionStore,
}

impl AppState {
    pub fn new(config: ServiceConfig, harmonizer: Option<LoadedModel>, color: Option<LoadedModel>) -> Self {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        let sessions = SessionStore::new(config.session_idle);
        Self {
            config,
            harmonizer: harmonizer.map(Arc::new),
            color: color.map(Arc::new),
            workers,
            sessions,
        }
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub weights_loaded: bool,
    pub model_config_hash: Option<String>,
    pub color_weights_loaded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultInfo {
    pub latency_ms: f64,
    pub used_default_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub has_fg_mask: bool,
    pub has_guide_mask: bool,
    pub has_result: bool,
    pub idle_ms: u64,
}

impl SessionInfo {
    fn of(s: &SessionRecord) -> Self {
        Self {
            session_id: s.id.clone(),
            height: s.composite.height(),
            width: s.composite.width(),
            has_fg_mask: s.fg_mask.is_some(),
            has_guide_mask: s.guide_mask.is_some(),
            has_result: s.last_result.is_some(),
            idle_ms: s.last_used.elapsed().as_millis() as u64,
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(INFO_HEADER)]);
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/harmonize", post(harmonize_handler))
        .route("/api/color_transfer", post(color_transfer_handler))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session).delete(delete_session))
        .route("/api/sessions/{id}/result", get(session_result))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        weights_loaded: state.harmonizer.is_some(),
        model_config_hash: state.harmonizer.as_ref().map(|m| m.config_hash.clone()),
        color_weights_loaded: state.color.is_some(),
    })
}

#[derive(Default)]
struct Upload {
    composite: Option<Bytes>,
    fg_mask: Option<Bytes>,
    guide_mask: Option<Bytes>,
    r1: Option<String>,
    r2: Option<String>,
    session: Option<String>,
}

async fn read_upload(mut multipart: Multipart) -> Result<Upload, ApiError> {
    let mut up = Upload::default();
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::BadRequest(format!("malformed multipart body: {}", e.body_text()));
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let slot_bytes = match name.as_str() {
            "composite" => Some(&mut up.composite),
            "fg_mask" => Some(&mut up.fg_mask),
            "guide_mask" => Some(&mut up.guide_mask),
            _ => None,
        };
        if let Some(slot) = slot_bytes {
            *slot = Some(field.bytes().await.map_err(bad)?);
            continue;
        }
        let slot_text = match name.as_str() {
            "r1" => &mut up.r1,
            "r2" => &mut up.r2,
            "session" => &mut up.session,
            other => return Err(ApiError::BadRequest(format!("unexpected field '{other}'"))),
        };
        *slot_text = Some(field.text().await.map_err(bad)?.trim().to_string());
    }
    Ok(up)
}

fn check_dimensions(bytes: &[u8], what: &str, max: usize) -> Result<(), ApiError> {
    let (h, w) = io::probe_dimensions(bytes).map_err(|e| ApiError::BadRequest(format!("{what}: {e}")))?;
    if h > max || w > max {
        return Err(ApiError::BadRequest(format!("{what} is {w}x{h}, larger than {max} pixels on a side")));
    }
    Ok(())
}

fn decode_composite(bytes: &[u8], max: usize) -> Result<Image, ApiError> {
    check_dimensions(bytes, "composite", max)?;
    io::decode_image(bytes).map_err(|e| ApiError::BadRequest(format!("composite: {e}")))
}

fn decode_mask(bytes: &[u8], what: &str, max: usize) -> Result<Mask, ApiError> {
    check_dimensions(bytes, what, max)?;
    io::decode_mask(bytes).map_err(|e| ApiError::BadRequest(format!("{what}: {e}")))
}

fn parse_ratio(value: Option<&str>, name: &str) -> Result<f64, ApiError> {
    let text = value.ok_or_else(|| ApiError::BadRequest(format!("missing field '{name}'")))?;
    let v: f64 = serde_json::from_str(text).map_err(|_| ApiError::BadRequest(format!("'{name}' is not a number")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(ApiError::Unprocessable(format!("{name}={v} is outside [0, 1]")));
    }
    Ok(v)
}

/// Builds the inference request, resolving the composite and masks from the
/// session when one is named.
fn build_request(state: &AppState, up: &Upload) -> Result<HarmonizeRequest, ApiError> {
    let max = state.config.max_dimension;
    let session = match &up.session {
        Some(id) => Some(
            state
                .sessions
                .touch(id)
                .ok_or_else(|| ApiError::NotFound(format!("no session '{id}'")))?,
        ),
        None => None,
    };
    let composite = match (&up.composite, &session) {
        (Some(bytes), _) => decode_composite(bytes, max)?,
        (None, Some(s)) => (*s.composite).clone(),
        (None, None) => return Err(ApiError::BadRequest("missing field 'composite'".into())),
    };
    let fg_mask = match (&up.fg_mask, session.as_ref().and_then(|s| s.fg_mask.as_ref())) {
        (Some(bytes), _) => decode_mask(bytes, "fg_mask", max)?,
        (None, Some(m)) => (**m).clone(),
        (None, None) => return Err(ApiError::BadRequest("missing field 'fg_mask'".into())),
    };
    let guide_mask = match (&up.guide_mask, session.as_ref().and_then(|s| s.guide_mask.as_ref())) {
        (Some(bytes), _) => Some(decode_mask(bytes, "guide_mask", max)?),
        (None, Some(m)) => Some((**m).clone()),
        (None, None) => None,
    };
    let req = HarmonizeRequest::new(composite, fg_mask, guide_mask);
    req.validate()?;
    Ok(req)
}

async fn run_job<F>(state: &AppState, job: F) -> Result<HarmonizeOutput, ApiError>
where
    F: FnOnce() -> iharmon_core::Result<HarmonizeOutput> + Send + 'static,
{
    let permit = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::Unavailable("worker pool closed".into()))?;
    let out = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        job()
    })
    .await
    .map_err(|e| ApiError::Internal(format!("inference task failed: {e}")))?;
    Ok(out?)
}

fn png_response(state: &AppState, session: Option<&str>, out: &HarmonizeOutput, started: Instant) -> Result<Response, ApiError> {
    let png = io::encode_png(&out.image).map_err(ApiError::from)?;
    let info = ResultInfo {
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
        used_default_reference: out.used_default_reference,
    };
    let info = serde_json::to_string(&info).map_err(|e| ApiError::Internal(e.to_string()))?;
    let info = HeaderValue::from_str(&info).map_err(|e| ApiError::Internal(e.to_string()))?;
    if let Some(id) = session {
        state.sessions.update(id, |s| s.last_result = Some(Arc::new(png.clone())));
    }
    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, HeaderValue::from_static("image/png")), (HeaderName::from_static(INFO_HEADER), info)],
        png,
    )
        .into_response())
}

/// Remembers the masks posted in this call for later calls in the session.
fn remember_masks(state: &AppState, up: &Upload, req: &HarmonizeRequest) {
    let Some(id) = &up.session else { return };
    state.sessions.update(id, |s| {
        if up.fg_mask.is_some() {
            s.fg_mask = Some(Arc::new(req.fg_mask.clone()));
        }
        if up.guide_mask.is_some() {
            s.guide_mask = req.guide_mask.clone().map(Arc::new);
        }
    });
}

fn harmonizer(state: &AppState) -> Result<Arc<LoadedModel>, ApiError> {
    state
        .harmonizer
        .clone()
        .ok_or_else(|| ApiError::Unavailable("harmonization weights are not loaded".into()))
}

async fn harmonize_handler(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let started = Instant::now();
    let up = read_upload(multipart).await?;
    let model = harmonizer(&state)?;
    let req = build_request(&state, &up)?;
    remember_masks(&state, &up, &req);
    let out = run_job(&state, move || harmonize(&req, &model.model)).await?;
    png_response(&state, up.session.as_deref(), &out, started)
}

async fn color_transfer_handler(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let started = Instant::now();
    let up = read_upload(multipart).await?;
    let r1 = parse_ratio(up.r1.as_deref(), "r1")?;
    let r2 = parse_ratio(up.r2.as_deref(), "r2")?;
    let model = harmonizer(&state)?;
    let color = state
        .color
        .clone()
        .ok_or_else(|| ApiError::Unavailable("color-transfer weights are not loaded".into()))?;
    let ratios = BlendRatios::new(r1, r2)?;
    let req = build_request(&state, &up)?;
    remember_masks(&state, &up, &req);
    let out = run_job(&state, move || color_transfer(&req, ratios, &model.model, &color.model)).await?;
    png_response(&state, up.session.as_deref(), &out, started)
}

async fn create_session(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let up = read_upload(multipart).await?;
    let bytes = up
        .composite
        .as_ref()
        .ok_or_else(|| ApiError::BadRequest("missing field 'composite'".into()))?;
    let composite = decode_composite(bytes, state.config.max_dimension)?;
    let record = state.sessions.create(composite);
    Ok((StatusCode::CREATED, Json(SessionInfo::of(&record))).into_response())
}

fn lookup(state: &AppState, id: &str) -> Result<SessionRecord, ApiError> {
    state
        .sessions
        .touch(id)
        .ok_or_else(|| ApiError::NotFound(format!("no session '{id}'")))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionInfo>, ApiError> {
    Ok(Json(SessionInfo::of(&lookup(&state, &id)?)))
}

async fn session_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = lookup(&state, &id)?;
    let png = s
        .last_result
        .ok_or_else(|| ApiError::NotFound(format!("session '{id}' has no result yet")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], (*png).clone()).into_response())
}

async fn delete_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    if state.sessions.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::NotFound(format!("no session '{id}'")))
    }
}
