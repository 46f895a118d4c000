//! HTTP control plane. Documents are JSON; the event log and the live
//! stream are newline-delimited JSON.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use eduloop_core::session::{Mode, PolicyPatch, SessionCommand, SessionError};

use crate::service::{CreateSession, NetError, Service, StreamEvent};
use crate::store::StoreError;

pub const NDJSON: &str = "application/x-ndjson";

impl NetError {
    pub fn status(&self) -> StatusCode {
        match self {
            NetError::Store(StoreError::SessionNotFound(_) | StoreError::LessonNotFound(_)) => StatusCode::NOT_FOUND,
            NetError::Store(StoreError::Lesson(_) | StoreError::InvalidId(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            NetError::Store(StoreError::Exists(_)) | NetError::NotLive(_) | NetError::WorkerGone(_) => StatusCode::CONFLICT,
            NetError::Engine(eduloop_core::Error::Session(_)) | NetError::BadRequest(_) | NetError::Frame(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for NetError {
    fn into_response(self) -> Response {
        let paths = match &self {
            NetError::Store(StoreError::Lesson(SessionError::Validation(p))) => p.clone(),
            _ => Vec::new(),
        };
        let body = if paths.is_empty() {
            json!({ "error": self.to_string() })
        } else {
            json!({ "error": self.to_string(), "paths": paths })
        };
        (self.status(), Json(body)).into_response()
    }
}

type Shared = State<Arc<Service>>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/lessons", get(list_lessons))
        .route("/lessons/{id}", get(get_lesson).put(put_lesson))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/policy", post(set_policy))
        .route("/sessions/{id}/command", post(command))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(service)
}

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, NetError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, NetError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| NetError::Io(std::io::Error::other(e.to_string())))?
}

async fn list_lessons(State(svc): Shared) -> Result<Response, NetError> {
    let ids = blocking(move || Ok(svc.store().lesson_ids()?)).await?;
    Ok(Json(json!({ "lessons": ids })).into_response())
}

async fn get_lesson(State(svc): Shared, Path(id): Path<String>) -> Result<Response, NetError> {
    let lesson = blocking(move || Ok(svc.store().lesson(&id)?)).await?;
    Ok(Json(lesson).into_response())
}

async fn put_lesson(State(svc): Shared, Path(id): Path<String>, body: String) -> Result<Response, NetError> {
    let lesson = blocking(move || Ok(svc.store().put_lesson(&id, &body)?)).await?;
    Ok(Json(lesson).into_response())
}

async fn list_sessions(State(svc): Shared) -> Result<Response, NetError> {
    let views = blocking(move || svc.views()).await?;
    Ok(Json(views).into_response())
}

/// Parses a JSON body; unlike the stock extractor, failures come back in
/// the API's own error shape.
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, NetError> {
    serde_json::from_slice(body).map_err(|e| NetError::BadRequest(e.to_string()))
}

async fn create_session(State(svc): Shared, body: Bytes) -> Result<Response, NetError> {
    let req: CreateSession = parse(&body)?;
    let view = blocking(move || svc.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(svc): Shared, Path(id): Path<String>) -> Result<Response, NetError> {
    let view = blocking(move || svc.view(&id)).await?;
    Ok(Json(view).into_response())
}

async fn set_policy(State(svc): Shared, Path(id): Path<String>, body: Bytes) -> Result<Response, NetError> {
    let patch: PolicyPatch = parse(&body)?;
    let out = svc.command(&id, SessionCommand::SetPolicy(patch)).await?;
    Ok(Json(out).into_response())
}

async fn command(State(svc): Shared, Path(id): Path<String>, body: Bytes) -> Result<Response, NetError> {
    let cmd: SessionCommand = parse(&body)?;
    let out = svc.command(&id, cmd).await?;
    Ok(Json(out).into_response())
}

async fn events(State(svc): Shared, Path(id): Path<String>) -> Result<Response, NetError> {
    let text = blocking(move || Ok(svc.store().events_jsonl(&id)?)).await?;
    Ok(([(header::CONTENT_TYPE, NDJSON)], text).into_response())
}

fn line(ev: &StreamEvent) -> Bytes {
    let mut v = serde_json::to_vec(ev).expect("event serializes");
    v.push(b'\n');
    Bytes::from(v)
}

/// One JSON line per event until the session ends. A subscriber that falls
/// behind receives a `gap` line with the number of events it missed.
async fn stream(State(svc): Shared, Path(id): Path<String>) -> Result<Response, NetError> {
    let handle = svc.live_or_err(&id)?;
    let rx = handle.subscribe();
    let mode = handle.view().mode;
    if mode == Mode::Completed {
        let ended = line(&StreamEvent::End { mode });
        return Ok(([(header::CONTENT_TYPE, NDJSON)], ended).into_response());
    }
    let body = futures_util::stream::unfold((rx, false), |(mut rx, done)| async move {
        if done {
            return None;
        }
        let ev = match rx.recv().await {
            Ok(ev) => ev,
            Err(RecvError::Lagged(n)) => StreamEvent::Gap { dropped: n },
            Err(RecvError::Closed) => return None,
        };
        let end = matches!(ev, StreamEvent::End { .. });
        Some((Ok::<_, Infallible>(line(&ev)), (rx, end)))
    });
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(body)).into_response())
}
