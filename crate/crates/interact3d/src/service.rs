//! HTTP inference service.
//!
//! `POST /predict` answers query points on an image, `POST /render` animates
//! the part under one point and serves the frames from an in-memory cache,
//! `GET /health` reports the loaded checkpoint. Responses are deterministic:
//! identical requests produce identical bytes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use interact3d_core::datamodel::{QueryPoint, RgbGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;

use crate::checkpoint::load_network;
use crate::io::{decode_image, encode_png};
use crate::network::{Network, NetworkConfig};
use crate::predict::{predict, render_interaction, DepthSource, PredictError, RenderManifest, RenderParams};

/// Largest accepted encoded image.
pub const MAX_IMAGE_BYTES: usize = 8 << 20;
/// Largest accepted image side in pixels.
pub const MAX_IMAGE_SIDE: usize = 4096;
/// Body limit; leaves room for base64 and the rest of the request.
pub const MAX_BODY_BYTES: usize = MAX_IMAGE_BYTES * 4 / 3 + (64 << 10);
/// Rendered clips kept in memory before the oldest are dropped.
pub const RENDER_CACHE_CLIPS: usize = 64;

/// A network with the hash of the checkpoint file it came from.
pub struct Model {
    pub net: Network,
    pub checkpoint_id: String,
}

impl Model {
    pub fn load(path: &Path) -> crate::checkpoint::Result<Self> {
        let (net, checkpoint_id) = load_network(path)?;
        Ok(Self { net, checkpoint_id })
    }
}

struct CachedClip {
    body: Bytes,
    frames: Vec<Bytes>,
}

#[derive(Default)]
struct RenderCache {
    clips: HashMap<String, Arc<CachedClip>>,
    order: Vec<String>,
}

#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<Model>>,
    cache: Arc<Mutex<RenderCache>>,
}

impl AppState {
    pub fn new(model: Option<Model>) -> Self {
        Self { model: model.map(Arc::new), cache: Arc::default() }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict_handler))
        .route("/render", post(render_handler))
        .route("/render/{id}/{file}", get(frame_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        let status = match &e {
            PredictError::BadRequest(_) => StatusCode::BAD_REQUEST,
            PredictError::TooManyPoints { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            PredictError::Unsupported(_) => StatusCode::UNPROCESSABLE_ENTITY,
            PredictError::Network(_) | PredictError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "status": self.status.as_u16() });
        (self.status, json_bytes(&body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_bytes<T: Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(bytes) => ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, format!("response encoding failed: {e}")).into_response(),
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    checkpoint_id: Option<&'a str>,
    config: Option<&'a NetworkConfig>,
}

async fn health(State(state): State<AppState>) -> Response {
    let m = state.model.as_deref();
    json_bytes(&Health {
        status: if m.is_some() { "ok" } else { "degraded" },
        checkpoint_id: m.map(|m| m.checkpoint_id.as_str()),
        config: m.map(|m| m.net.config()),
    })
}

fn model(state: &AppState) -> ApiResult<Arc<Model>> {
    state.model.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))
}

fn decode_upload(bytes: &[u8]) -> ApiResult<RgbGrid> {
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image exceeds {MAX_IMAGE_BYTES} bytes")));
    }
    let (w, h) = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .ok()
        .and_then(|r| r.into_dimensions().ok())
        .ok_or_else(|| ApiError::bad("image is not a readable PNG"))?;
    if w as usize > MAX_IMAGE_SIDE || h as usize > MAX_IMAGE_SIDE {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {w}x{h}, sides are limited to {MAX_IMAGE_SIDE}"),
        ));
    }
    decode_image(bytes).map_err(|e| ApiError::bad(format!("image: {e}")))
}

fn decode_base64(s: &str) -> ApiResult<Vec<u8>> {
    let s = s.split_once(',').filter(|(head, _)| head.starts_with("data:")).map_or(s, |(_, rest)| rest);
    if s.len() > MAX_IMAGE_BYTES * 4 / 3 + 4 {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image exceeds {MAX_IMAGE_BYTES} bytes")));
    }
    base64::engine::general_purpose::STANDARD.decode(s.trim()).map_err(|e| ApiError::bad(format!("image is not base64: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictJson {
    image: String,
    points: Vec<QueryPoint>,
    #[serde(default)]
    include_depth: bool,
}

#[derive(Deserialize, Default)]
struct PredictQuery {
    #[serde(default)]
    include_depth: bool,
}

struct PredictInput {
    image: RgbGrid,
    points: Vec<QueryPoint>,
    include_depth: bool,
}

fn is_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

async fn read_body(req: Request) -> ApiResult<Bytes> {
    axum::body::to_bytes(req.into_body(), MAX_BODY_BYTES)
        .await
        .map_err(|e| ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("request body: {e}")))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))
}

/// Multipart fields: `image` (file), `points` (JSON list) and optionally
/// `include_depth` (`true`/`false`).
async fn read_multipart(req: Request) -> ApiResult<PredictInput> {
    let mut form = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad(e.body_text()))?;
    let (mut image, mut points, mut include_depth) = (None, None, false);
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        match name.as_str() {
            "image" => image = Some(decode_upload(&data)?),
            "points" => points = Some(parse_json::<Vec<QueryPoint>>(&data)?),
            "include_depth" => {
                include_depth = match &data[..] {
                    b"true" | b"1" => true,
                    b"false" | b"0" => false,
                    _ => return Err(ApiError::bad("include_depth must be true or false")),
                }
            }
            other => return Err(ApiError::bad(format!("unexpected form field `{other}`"))),
        }
    }
    Ok(PredictInput {
        image: image.ok_or_else(|| ApiError::bad("missing `image` field"))?,
        points: points.ok_or_else(|| ApiError::bad("missing `points` field"))?,
        include_depth,
    })
}

async fn predict_handler(State(state): State<AppState>, Query(query): Query<PredictQuery>, req: Request) -> ApiResult<Response> {
    let input = if is_multipart(req.headers()) {
        read_multipart(req).await?
    } else {
        let body: PredictJson = parse_json(&read_body(req).await?)?;
        PredictInput { image: decode_upload(&decode_base64(&body.image)?)?, points: body.points, include_depth: body.include_depth }
    };
    crate::predict::check_points(&input.points)?;
    let model = model(&state)?;
    let response = tokio::task::spawn_blocking(move || {
        predict(&model.net, &input.image, &input.points, &model.checkpoint_id, input.include_depth || query.include_depth)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))??;
    Ok(json_bytes(&response))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderJson {
    image: String,
    point: QueryPoint,
    #[serde(default)]
    params: RenderParams,
}

#[derive(Serialize)]
struct RenderResponse<'a> {
    id: &'a str,
    manifest: &'a RenderManifest,
    frames: Vec<String>,
}

fn frame_file(i: usize) -> String {
    format!("frame_{i:03}.png")
}

fn render_key(checkpoint_id: &str, image: &[u8], point: QueryPoint, params: &RenderParams) -> String {
    let mut h = Sha256::new();
    h.update(checkpoint_id.as_bytes());
    h.update([0]);
    h.update(Sha256::digest(image));
    h.update(serde_json::to_vec(&(point, params)).expect("plain data serializes"));
    hex::encode(h.finalize())
}

async fn render_handler(State(state): State<AppState>, req: Request) -> ApiResult<Response> {
    let body: RenderJson = parse_json(&read_body(req).await?)?;
    body.params.validate()?;
    body.point.validate("point").map_err(|e| ApiError::bad(e.to_string()))?;
    let model = model(&state)?;
    let raw = decode_base64(&body.image)?;
    let key = render_key(&model.checkpoint_id, &raw, body.point, &body.params);
    if let Some(hit) = state.cache.lock().expect("cache lock").clips.get(&key).cloned() {
        return Ok(clip_response(&hit));
    }
    let image = decode_upload(&raw)?;
    let id = key.clone();
    let clip = tokio::task::spawn_blocking(move || -> ApiResult<CachedClip> {
        let clip = render_interaction(&model.net, &image, body.point, DepthSource::Predicted, &body.params, frame_file)?;
        let frames = clip.frames.iter().map(|f| Bytes::from(encode_png(f))).collect();
        let urls = clip.manifest.frames.iter().map(|f| format!("/render/{id}/{}", f.file)).collect();
        let body = serde_json::to_vec(&RenderResponse { id: &id, manifest: &clip.manifest, frames: urls })
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(CachedClip { body: body.into(), frames })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")))??;

    // The first writer for a key wins, so concurrent renders of one request
    // all return the same cached clip.
    let mut cache = state.cache.lock().expect("cache lock");
    let clip = match cache.clips.get(&key) {
        Some(existing) => existing.clone(),
        None => {
            if cache.order.len() >= RENDER_CACHE_CLIPS {
                let old = cache.order.remove(0);
                cache.clips.remove(&old);
            }
            cache.order.push(key.clone());
            let clip = Arc::new(clip);
            cache.clips.insert(key, clip.clone());
            clip
        }
    };
    Ok(clip_response(&clip))
}

fn clip_response(clip: &CachedClip) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], Body::from(clip.body.clone())).into_response()
}

async fn frame_handler(State(state): State<AppState>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let clip = state.cache.lock().expect("cache lock").clips.get(&id).cloned();
    let clip = clip.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired clip"))?;
    let frame = file
        .strip_prefix("frame_")
        .and_then(|s| s.strip_suffix(".png"))
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| frame_file(i) == file)
        .and_then(|i| clip.frames.get(i).cloned())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no such frame"))?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], Body::from(frame)).into_response())
}
