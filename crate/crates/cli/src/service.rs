//! HTTP service over an immutable library and checkpoint snapshot.
//!
//! | method | path               | body                | reply                 |
//! |--------|--------------------|---------------------|-----------------------|
//! | GET    | `/api/library`     |                     | `LibraryInfo`         |
//! | POST   | `/api/simulate`    | `SimulateRequest`   | `SimulateResponse`    |
//! | POST   | `/api/pmr`         | `PmrRequest`        | `PmrResponse`         |
//! | POST   | `/api/suggest`     | `SuggestionRequest` | `SuggestionResponse`  |
//! | GET    | `/api/checkpoints` |                     | list of `CheckpointInfo` |
//!
//! Errors reply `{"error": ..., "field": ...}` with status 400 for bad
//! payloads, 404 for unknown checkpoints and 500 otherwise.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use flowsculpt::env::EnvConfig;
use flowsculpt::suggest::SuggestionRequest;
use flowsculpt::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{
    library_info, parse_document, pmr_of, simulate, suggest_with, to_document, CheckpointStore, FieldError, PmrRequest,
    RequestError, SimulateRequest,
};

pub struct AppState {
    pub env: EnvConfig,
    pub checkpoints: CheckpointStore,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/library", get(get_library))
        .route("/api/simulate", post(post_simulate))
        .route("/api/pmr", post(post_pmr))
        .route("/api/suggest", post(post_suggest))
        .route("/api/checkpoints", get(get_checkpoints))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "str::is_empty")]
    field: String,
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, field: impl Into<String>, error: impl ToString) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.to_string(),
                field: field.into(),
            },
        }
    }
}

impl From<FieldError> for ApiError {
    fn from(e: FieldError) -> Self {
        let field = if e.field == "." { String::new() } else { e.field };
        ApiError::new(StatusCode::BAD_REQUEST, field, e.message)
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = match e.error {
            Error::Numeric(_) | Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.field, e.error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let text = to_document(&self.body).unwrap_or_else(|_| "{}\n".into());
        (self.status, [(header::CONTENT_TYPE, "application/json")], text).into_response()
    }
}

fn json_reply<T: Serialize>(value: &T) -> Result<Response, ApiError> {
    let text = to_document(value).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "", e))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    Ok(parse_document(body)?)
}

async fn get_library(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    json_reply(&library_info(&state.env))
}

async fn post_simulate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: SimulateRequest = parse(&body)?;
    json_reply(&simulate(&state.env, &req)?)
}

async fn post_pmr(body: Bytes) -> Result<Response, ApiError> {
    let req: PmrRequest = parse(&body)?;
    json_reply(&pmr_of(&req)?)
}

async fn post_suggest(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: SuggestionRequest = parse(&body)?;
    let Some(ck) = state.checkpoints.get(&req.checkpoint) else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "checkpoint",
            format!("unknown checkpoint '{}'", req.checkpoint),
        ));
    };
    let worker = Arc::clone(&state);
    let reply = tokio::task::spawn_blocking(move || suggest_with(&ck, &worker.env, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "", e))??;
    let text = reply
        .to_json()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "", e))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn get_checkpoints(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    json_reply(&state.checkpoints.list())
}
