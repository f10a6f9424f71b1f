//! HTTP/JSON front end over [`SessionStore`].
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/sessions` | `{checkpoint, seed, rows?, cols?}` | session view, 201 |
//! | POST | `/sessions/{id}/resample` | `{blocks: [[r, c], ..], revision?}` | view + `changed`, `distortion_outside` |
//! | POST | `/sessions/{id}/undo` | `{revision?}` or empty | view |
//! | GET | `/sessions/{id}/image.png` | | PNG |
//! | GET | `/sessions/{id}/state` | | view + latent and history |
//!
//! Block coordinates are 1-based `(row, col)`. Errors are `{"error": ..}`
//! with 400 for bad input, 404 for unknown sessions and 409 for stale
//! revisions.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use ssn_core::LatentGrid;

use crate::session::{Rendered, ServiceError, Session, SessionStore};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleRequest {
    pub blocks: Vec<(usize, usize)>,
    pub revision: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndoRequest {
    pub revision: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session: String,
    pub revision: u64,
    pub rows: usize,
    pub cols: usize,
    pub history_depth: usize,
    /// SHA-256 of the PNG, hex.
    pub digest: String,
    /// Base64 PNG of the current image.
    pub image_png: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResampleResponse {
    #[serde(flatten)]
    pub view: SessionView,
    pub blocks: Vec<(usize, usize)>,
    pub changed: Vec<Vec<bool>>,
    pub distortion_outside: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryView {
    pub targets: Vec<(usize, usize)>,
    pub digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateResponse {
    #[serde(flatten)]
    pub view: SessionView,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub latent: LatentGrid,
    pub history: Vec<HistoryView>,
}

fn view(s: &Session, r: &Rendered) -> SessionView {
    SessionView {
        session: s.id.clone(),
        revision: s.revision,
        rows: s.rows,
        cols: s.cols,
        history_depth: s.history.len(),
        digest: r.digest.clone(),
        image_png: base64::engine::general_purpose::STANDARD.encode(&r.png),
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed request: {e}")))
}

type Shared = Arc<SessionStore>;

async fn create(State(store): State<Shared>, body: Bytes) -> Result<Response, ServiceError> {
    let req: CreateRequest = parse_json(&body)?;
    let grid = match (req.rows, req.cols) {
        (Some(r), Some(c)) => Some((r, c)),
        (None, None) => None,
        _ => return Err(ServiceError::BadRequest("give both rows and cols or neither".into())),
    };
    let (s, r) = store.create(&req.checkpoint, req.seed, grid)?;
    Ok((StatusCode::CREATED, Json(view(&s, &r))).into_response())
}

async fn resample(State(store): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<ResampleResponse>, ServiceError> {
    let req: ResampleRequest = parse_json(&body)?;
    store.with_session(&id, |s| {
        let model = store.model(&s.checkpoint)?;
        let out = s.resample(&model, &req.blocks, req.revision)?;
        Ok(Json(ResampleResponse {
            view: view(s, &out.rendered),
            blocks: s.history.last().map(|h| h.targets.clone()).unwrap_or_default(),
            changed: out.changed,
            distortion_outside: out.distortion_outside,
        }))
    })
}

async fn undo(State(store): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<SessionView>, ServiceError> {
    let req: UndoRequest = if body.iter().all(u8::is_ascii_whitespace) {
        UndoRequest::default()
    } else {
        parse_json(&body)?
    };
    store.with_session(&id, |s| {
        let model = store.model(&s.checkpoint)?;
        let r = s.undo(&model, req.revision)?;
        Ok(Json(view(s, &r)))
    })
}

async fn image(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    store.with_session(&id, |s| {
        let model = store.model(&s.checkpoint)?;
        let r = model.render(&s.current)?;
        let mut resp = r.png.into_response();
        let h = resp.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        h.insert("x-revision", HeaderValue::from(s.revision));
        h.insert("x-digest", HeaderValue::from_str(&r.digest).expect("hex is a valid header"));
        Ok(resp)
    })
}

async fn state(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<StateResponse>, ServiceError> {
    store.with_session(&id, |s| {
        let model = store.model(&s.checkpoint)?;
        let r = model.render(&s.current)?;
        Ok(Json(StateResponse {
            view: view(s, &r),
            checkpoint: s.checkpoint.clone(),
            seed: s.seed,
            latent: s.current.clone(),
            history: s
                .history
                .iter()
                .map(|h| HistoryView {
                    targets: h.targets.clone(),
                    digest: h.digest.clone(),
                })
                .collect(),
        }))
    })
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/resample", post(resample))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/image.png", get(image))
        .route("/sessions/{id}/state", get(state))
        .with_state(store)
}

pub async fn serve(store: Shared, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
