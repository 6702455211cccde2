//! Session-oriented HTTP front end for the photo editor.
//!
//! Endpoints (JSON bodies, images as base64 PNG):
//!
//! | method | path                    | body                              |
//! |--------|-------------------------|-----------------------------------|
//! | GET    | `/info`                 |                                   |
//! | POST   | `/session`              | `{image}`                         |
//! | GET    | `/session/{id}`         |                                   |
//! | POST   | `/session/{id}/brush`   | `{x, y, radius, color, step}`     |
//! | POST   | `/session/{id}/latent`  | `{index, value}`                  |
//! | POST   | `/session/{id}/undo`    |                                   |
//! | POST   | `/session/{id}/reset`   |                                   |
//!
//! Brush coordinates are pixels of the working resolution reported by
//! `/info`; colors are 0–255 per channel. Errors are `{code, message}`.

mod error;
mod store;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::UNIX_EPOCH;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ian_core::editor::{Brush, EditSession, LatentGenerator, DEFAULT_STEP};
use ian_core::ian::IanModel;
use ian_core::imaging;
use image::{DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use store::{Lookup, SessionStore};

pub type Model = IanModel<f32>;
pub type Session = EditSession<f32>;

pub const DEFAULT_CAPACITY: usize = 64;
/// Largest accepted request body.
pub const DEFAULT_MAX_BODY: usize = 8 << 20;
/// Largest accepted decoded image, in pixels.
pub const MAX_PIXELS: u64 = 4096 * 4096;

#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<Model>>,
    store: Arc<SessionStore>,
    max_body: usize,
}

impl AppState {
    pub fn new(model: Option<Model>, capacity: usize) -> Self {
        Self {
            model: model.map(Arc::new),
            store: Arc::new(SessionStore::new(capacity)),
            max_body: DEFAULT_MAX_BODY,
        }
    }

    pub fn with_max_body(mut self, bytes: usize) -> Self {
        self.max_body = bytes;
        self
    }

    pub fn model(&self) -> Option<&Arc<Model>> {
        self.model.as_ref()
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn require_model(&self) -> Result<Arc<Model>, ApiError> {
        self.model.clone().ok_or_else(ApiError::no_model)
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.max_body;
    Router::new()
        .route("/info", get(info))
        .route("/session", post(create))
        .route("/session/{id}", get(show))
        .route("/session/{id}/brush", post(brush))
        .route("/session/{id}/latent", post(latent))
        .route("/session/{id}/undo", post(undo))
        .route("/session/{id}/reset", post(reset))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Info {
    pub image_size: usize,
    pub latent_dim: usize,
    pub mdc: String,
    pub capacity: usize,
    pub default_step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrushRequest {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: [f64; 3],
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentRequest {
    pub index: usize,
    pub value: f64,
}

/// Everything about a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub size: usize,
    pub latents: Vec<f64>,
    pub mu: Vec<f64>,
    pub original: String,
    pub reconstruction: String,
    pub output: String,
    pub mask: String,
    pub history: usize,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub output: String,
    pub mask: String,
    pub latents: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrushResponse {
    pub output: String,
    pub mask: String,
    pub latents: Vec<f64>,
    /// Patch loss before and after the step; absent when the disc misses the image.
    pub patch_loss_before: Option<f64>,
    pub patch_loss_after: Option<f64>,
}

pub fn png_base64(img: DynamicImage) -> Result<String, ApiError> {
    let bytes = imaging::encode_png(&img).map_err(ApiError::internal)?;
    Ok(B64.encode(bytes))
}

fn rgb_b64(t: &ian_core::Tensor32) -> Result<String, ApiError> {
    png_base64(DynamicImage::ImageRgb8(imaging::unit_to_rgb(t).map_err(ApiError::internal)?))
}

fn gray_b64(t: &ian_core::Tensor32) -> Result<String, ApiError> {
    png_base64(DynamicImage::ImageLuma8(imaging::unit_to_gray(t).map_err(ApiError::internal)?))
}

fn latents(s: &Session) -> Vec<f64> {
    s.latents().iter().map(|&v| v as f64).collect()
}

fn edit_response(s: &Session) -> Result<EditResponse, ApiError> {
    Ok(EditResponse {
        output: rgb_b64(s.output())?,
        mask: gray_b64(s.mask())?,
        latents: latents(s),
    })
}

fn full_state(id: &str, created: u64, s: &Session) -> Result<SessionState, ApiError> {
    Ok(SessionState {
        id: id.to_string(),
        size: s.original().shape()[1],
        latents: latents(s),
        mu: s.posterior().0.iter().map(|&v| v as f64).collect(),
        original: rgb_b64(s.original())?,
        reconstruction: rgb_b64(s.reconstruction())?,
        output: rgb_b64(s.output())?,
        mask: gray_b64(s.mask())?,
        history: s.history_len(),
        created,
    })
}

/// Decode a base64 image, refusing oversized ones before full decoding.
pub fn decode_image(b64: &str) -> Result<DynamicImage, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    let reader = ImageReader::new(std::io::Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    if !matches!(reader.format(), Some(image::ImageFormat::Png | image::ImageFormat::Jpeg)) {
        return Err(ApiError::bad_request("image must be PNG or JPEG"));
    }
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
    if w as u64 * h as u64 > MAX_PIXELS {
        return Err(ApiError::too_large(format!("image is {w}×{h}, above the {MAX_PIXELS}-pixel limit")));
    }
    imaging::decode(&bytes).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(ApiError::from)
}

/// Run `f` on the locked session off the async runtime.
async fn with_session<R: Send + 'static>(
    state: &AppState,
    id: String,
    f: impl FnOnce(&Model, &mut Session, u64) -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    let model = state.require_model()?;
    let (entry, created) = match state.store.get(&id) {
        Lookup::Found(entry, created) => (entry, created),
        Lookup::Gone => return Err(ApiError::gone(&id)),
        Lookup::Unknown => return Err(ApiError::not_found(&id)),
    };
    tokio::task::spawn_blocking(move || {
        let mut session = entry.lock().unwrap_or_else(|p| p.into_inner());
        f(&model, &mut session, created)
    })
    .await
    .map_err(ApiError::internal)?
}

async fn info(State(state): State<AppState>) -> Result<Json<Info>, ApiError> {
    let model = state.require_model()?;
    Ok(Json(Info {
        image_size: model.config.image_size,
        latent_dim: model.latent_dim(),
        mdc: model.config.mdc.to_string(),
        capacity: state.store.capacity(),
        default_step: DEFAULT_STEP,
    }))
}

async fn create(
    State(state): State<AppState>,
    payload: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<Json<SessionState>, ApiError> {
    let model = state.require_model()?;
    let req = body(payload)?;
    let img = decode_image(&req.image)?;
    let size = model.config.image_size as u32;
    let session = tokio::task::spawn_blocking(move || {
        let x = imaging::rgb_to_unit(&imaging::prepare(&img, size, true));
        Session::new(model.as_ref(), x, Session::default_sigma(model.as_ref())).map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)??;
    let created = UNIX_EPOCH.elapsed().map(|d| d.as_secs()).unwrap_or(0);
    let state_json = full_state("", created, &session)?;
    let id = state.store.insert(Mutex::new(session), created);
    Ok(Json(SessionState { id, ..state_json }))
}

async fn show(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let key = id.clone();
    with_session(&state, id, move |_, s, created| full_state(&key, created, s)).await.map(Json)
}

async fn brush(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<BrushRequest>, JsonRejection>,
) -> Result<Json<BrushResponse>, ApiError> {
    let req = body(payload)?;
    if req.color.iter().any(|c| !(0.0..=255.0).contains(c)) {
        return Err(ApiError::unprocessable("color components must be in [0, 255]"));
    }
    let brush = Brush {
        x: req.x,
        y: req.y,
        radius: req.radius,
        color: req.color.map(|c| c / 255.0),
        step: req.step,
    };
    brush.validate().map_err(ApiError::unprocessable)?;
    with_session(&state, id, move |model, s, _| {
        let before = s.patch_loss(model, &brush).map_err(ApiError::internal)?;
        s.apply_brush(model, &brush).map_err(ApiError::internal)?;
        let after = s.patch_loss(model, &brush).map_err(ApiError::internal)?;
        let r = edit_response(s)?;
        Ok(Json(BrushResponse {
            output: r.output,
            mask: r.mask,
            latents: r.latents,
            patch_loss_before: before.map(|v| v as f64),
            patch_loss_after: after.map(|v| v as f64),
        }))
    })
    .await
}

async fn latent(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<LatentRequest>, JsonRejection>,
) -> Result<Json<EditResponse>, ApiError> {
    let req = body(payload)?;
    if !req.value.is_finite() {
        return Err(ApiError::unprocessable("latent value must be finite"));
    }
    with_session(&state, id, move |model, s, _| {
        if req.index >= s.latents().len() {
            return Err(ApiError::unprocessable(format!(
                "latent index {} out of range (latent_dim {})",
                req.index,
                s.latents().len()
            )));
        }
        s.set_latent(model, req.index, req.value).map_err(ApiError::internal)?;
        edit_response(s).map(Json)
    })
    .await
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<EditResponse>, ApiError> {
    with_session(&state, id, move |model, s, _| {
        s.undo(model).map_err(ApiError::internal)?;
        edit_response(s).map(Json)
    })
    .await
}

async fn reset(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let key = id.clone();
    with_session(&state, id, move |_, s, created| {
        s.reset();
        full_state(&key, created, s).map(Json)
    })
    .await
}
