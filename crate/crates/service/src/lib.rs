//! JSON-over-HTTP annotation service. The UI polls the queue, fetches
//! images, posts labels and asks for the next cycle; training and scoring
//! run on a blocking worker so requests stay responsive.

mod image;
mod state;

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lpal_core::datapool::HumanLabelOutcome;
use lpal_core::{LabelSet, Light, Weather};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

pub use image::encode_png;
pub use state::{AdvanceRefusal, AppState, LoopState, Progress, QueueEntry, StatusSnapshot, SuggestedLabel};

pub const DEFAULT_PORT: u16 = 8080;

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<LoopState>,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.to_string(),
                message: message.into(),
                remaining: None,
                state: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub id: u64,
    pub weather: String,
    pub light: String,
}

#[derive(Debug, Default, Deserialize)]
struct QueueParams {
    limit: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct AdvanceParams {
    force: Option<bool>,
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/samples/:id/image", get(sample_image))
        .route("/api/labels", post(post_label))
        .route("/api/cycle/advance", post(advance))
        .route("/api/status", get(status))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(cors)
        .with_state(state)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_listener(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(listener, state).await
}

async fn queue(State(state): State<AppState>, params: Option<Query<QueueParams>>) -> Result<Json<Vec<QueueEntry>>, ApiError> {
    let limit = match params.and_then(|Query(p)| p.limit) {
        None => None,
        Some(raw) => match raw.parse::<i64>() {
            Ok(l) if l > 0 => Some(l as usize),
            _ => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_limit",
                    format!("limit must be a positive integer, got {raw:?}"),
                ))
            }
        },
    };
    Ok(Json(state.queue(limit)))
}

async fn sample_image(State(state): State<AppState>, Path(raw): Path<String>) -> Result<Response, ApiError> {
    let unknown = || ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample {raw:?}"));
    let id: u64 = raw.parse().map_err(|_| unknown())?;
    let (side, pixels) = state.image(id).ok_or_else(unknown)?;
    let png = encode_png(side, &pixels)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_label(
    State(state): State<AppState>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> Result<Json<StatusSnapshot>, ApiError> {
    let Json(req) = body.map_err(|r| ApiError::new(r.status(), "invalid_body", r.body_text()))?;
    let weather: Weather = req
        .weather
        .parse()
        .map_err(|e: lpal_core::Error| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_label", e.to_string()))?;
    let light: Light = req
        .light
        .parse()
        .map_err(|e: lpal_core::Error| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_label", e.to_string()))?;
    let worker = state.clone();
    let (outcome, snapshot) = tokio::task::spawn_blocking(move || worker.label(req.id, LabelSet::new(weather, light)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| match e {
            lpal_core::Error::UnknownSample(id) => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample {id}"))
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.kind(), other.to_string()),
        })?;
    match outcome {
        HumanLabelOutcome::Applied | HumanLabelOutcome::Unchanged => Ok(Json(snapshot)),
        HumanLabelOutcome::NotQueued => Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_queued",
            format!("sample {} is not in the human queue", req.id),
        )),
    }
}

async fn advance(
    State(state): State<AppState>,
    params: Option<Query<AdvanceParams>>,
    body: Bytes,
) -> Result<(StatusCode, Json<StatusSnapshot>), ApiError> {
    let mut force = params.and_then(|Query(p)| p.force).unwrap_or(false);
    if !body.iter().all(u8::is_ascii_whitespace) {
        let parsed: AdvanceParams = serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))?;
        force |= parsed.force.unwrap_or(false);
    }
    let snapshot = state.begin_advance(force).map_err(|refusal| match refusal {
        AdvanceRefusal::Busy(s) => {
            let mut e = ApiError::new(StatusCode::CONFLICT, "cycle_running", "a cycle is already running");
            e.body.state = Some(s);
            e
        }
        AdvanceRefusal::QueueNotEmpty(n) => {
            let mut e = ApiError::new(
                StatusCode::CONFLICT,
                "queue_not_empty",
                format!("{n} queued samples still need labels; pass force to advance anyway"),
            );
            e.body.remaining = Some(n);
            e
        }
    })?;
    let worker = state.clone();
    tokio::task::spawn_blocking(move || worker.run_cycle());
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

async fn status(State(state): State<AppState>) -> Json<StatusSnapshot> {
    Json(state.snapshot())
}
