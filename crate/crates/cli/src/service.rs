use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use wr_core::wireframe::{color_histogram, ColorHistogram, RasterImage, Wireframe};

use crate::infer::{Engine, Guidance};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Request bodies above this size are rejected with 413.
    pub max_body_bytes: usize,
    /// Forward passes allowed to run at once; the rest wait in FIFO order.
    pub max_in_flight: usize,
    /// Budget for queueing plus inference before a request gets 503.
    pub timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 8 * 1024 * 1024,
            max_in_flight: 2,
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Invalid(String),
    #[error("server busy, try again later")]
    Busy,
    #[error("internal error: {0}")]
    Internal(String),
    /// A body extractor refused the request, keeping its status.
    #[error("{1}")]
    Rejected(StatusCode, String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Rejected(status, _) => *status,
        }
    }
}

impl From<wr_core::Error> for ServiceError {
    fn from(e: wr_core::Error) -> Self {
        use wr_core::Error as E;
        match e {
            E::Wireframe(_) | E::Image(_) | E::Json(_) | E::Config(_) | E::Shape(_) => ServiceError::Invalid(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::warn!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Annotation object in the dataset format.
    pub wireframe: serde_json::Value,
    /// 256 rows of per-channel fractions.
    #[serde(default)]
    pub histogram: Option<Vec<[f64; 3]>>,
    /// Base64 PNG or JPEG whose histogram guides the render.
    #[serde(default)]
    pub reference_image: Option<String>,
    /// Must name the loaded checkpoint when present.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenderResponse {
    /// Base64 PNG.
    pub scene: String,
    /// Base64 PNG.
    pub reconstructed_wireframe: String,
    pub width: usize,
    pub height: usize,
    pub latency_ms: f64,
    pub model_version: String,
}

struct AppState {
    engine: Arc<Engine>,
    permits: Arc<Semaphore>,
    timeout: Duration,
}

pub fn router(engine: Arc<Engine>, cfg: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        engine,
        permits: Arc::new(Semaphore::new(cfg.max_in_flight.max(1))),
        timeout: cfg.timeout,
    });
    let v1 = Router::new()
        .route("/render", post(render))
        .route("/histogram", post(histogram))
        .route("/health", get(health))
        .route("/model-info", get(model_info));
    Router::new()
        .nest("/v1", v1)
        .layer(DefaultBodyLimit::max(cfg.max_body_bytes))
        .with_state(state)
}

fn parse_request(body: &[u8], engine: &Engine) -> Result<(Wireframe, Guidance), ServiceError> {
    let req: RenderRequest =
        serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("invalid request body: {e}")))?;
    if let Some(id) = &req.checkpoint {
        let loaded = engine.checkpoint_id();
        if *id != loaded {
            return Err(ServiceError::Invalid(format!(
                "checkpoint `{id}` is not loaded (serving `{loaded}`)"
            )));
        }
    }
    let raw = serde_json::to_vec(&req.wireframe).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let wf = Wireframe::from_json(&raw).map_err(|e| ServiceError::Invalid(format!("invalid wireframe: {e}")))?;
    let guidance = match (req.histogram, req.reference_image) {
        (Some(_), Some(_)) => {
            return Err(ServiceError::Invalid(
                "give either histogram or reference_image, not both".into(),
            ))
        }
        (Some(rows), None) => Guidance::Histogram(
            ColorHistogram::from_rows(&rows).map_err(|e| ServiceError::Invalid(format!("invalid histogram: {e}")))?,
        ),
        (None, Some(b64)) => {
            let bytes = BASE64
                .decode(b64.trim())
                .map_err(|e| ServiceError::Invalid(format!("reference_image is not base64: {e}")))?;
            Guidance::Reference(decode_image(&bytes)?)
        }
        (None, None) => Guidance::None,
    };
    Ok((wf, guidance))
}

fn decode_image(bytes: &[u8]) -> Result<RasterImage, ServiceError> {
    let img = RasterImage::decode(bytes).map_err(|e| ServiceError::Invalid(format!("cannot decode image: {e}")))?;
    if img.channels() != 3 {
        return Err(ServiceError::Invalid(format!("expected an RGB image, got {} channels", img.channels())));
    }
    Ok(img)
}

fn encode(img: &RasterImage) -> Result<String, ServiceError> {
    Ok(BASE64.encode(img.encode_png()?))
}

/// Runs `job` on the blocking pool once a permit is free, within the
/// configured budget.
async fn run_limited<T, F>(state: &AppState, job: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    let permits = state.permits.clone();
    let work = async move {
        let permit = permits.acquire_owned().await.map_err(|_| ServiceError::Busy)?;
        tokio::task::spawn_blocking(move || {
            let out = job();
            drop(permit);
            out
        })
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
    };
    tokio::time::timeout(state.timeout, work)
        .await
        .map_err(|_| ServiceError::Busy)?
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<RenderResponse>, ServiceError> {
    let start = Instant::now();
    let engine = state.engine.clone();
    let (wf, guidance) = parse_request(&body, &engine)?;
    let model_version = engine.model_version();
    let out = run_limited(&state, move || {
        let r = engine.render(&wf, &guidance)?;
        Ok((encode(&r.scene)?, encode(&r.wireframe)?, r.scene.width(), r.scene.height()))
    })
    .await?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    tracing::debug!(latency_ms, "rendered");
    Ok(Json(RenderResponse {
        scene: out.0,
        reconstructed_wireframe: out.1,
        width: out.2,
        height: out.3,
        latency_ms,
        model_version,
    }))
}

/// Accepts the image as the raw body or as the first multipart field.
async fn histogram(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<ColorHistogram>, ServiceError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes = if is_multipart {
        let mut form = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ServiceError::Rejected(e.status(), e.body_text()))?;
        let field = form
            .next_field()
            .await
            .map_err(|e| ServiceError::Rejected(e.status(), e.body_text()))?
            .ok_or_else(|| ServiceError::Invalid("multipart body has no fields".into()))?;
        field
            .bytes()
            .await
            .map_err(|e| ServiceError::Rejected(e.status(), e.body_text()))?
    } else {
        Bytes::from_request(req, &state)
            .await
            .map_err(|e| ServiceError::Rejected(e.status(), e.body_text()))?
    };
    let img = decode_image(&bytes)?;
    Ok(Json(color_histogram(&img)?))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": state.engine.model_version() }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let e = &state.engine;
    let meta = e.meta();
    Json(json!({
        "model_version": e.model_version(),
        "checkpoint": e.checkpoint_id(),
        "code_version": meta.code_version,
        "epoch": meta.epoch,
        "step": meta.step,
        "input_size": e.input_size(),
        "guided": e.is_guided(),
        "line_width": meta.config.augment.line_width,
        "model": meta.config.model,
    }))
}
