use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio_stream::wrappers::BroadcastStream;

use crate::session::{SessionHandle, SteerError};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveRequest {
    omega_x: Option<f64>,
    omega_theta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResetRequest {
    x: Option<f64>,
    theta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    ticks: usize,
}

fn bad_request(message: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message.into() }))).into_response()
}

impl IntoResponse for SteerError {
    fn into_response(self) -> Response {
        match self {
            SteerError::Rejected(m) => bad_request(m),
            SteerError::Closed => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "session stopped" }))).into_response(),
        }
    }
}

/// Empty bodies parse as `{}`.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| bad_request(format!("malformed request: {e}")))
}

pub fn router(session: SessionHandle) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/session", get(get_session))
        .route("/objective", post(post_objective))
        .route("/reset", post(post_reset))
        .route("/pause", post(post_pause))
        .route("/resume", post(post_resume))
        .route("/step", post(post_step))
        .route("/stream", get(stream))
        .with_state(session)
}

async fn get_session(State(s): State<SessionHandle>) -> Response {
    match s.snapshot().await {
        Ok(state) => Json(state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_objective(State(s): State<SessionHandle>, body: Bytes) -> Response {
    let req: ObjectiveRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match s.set_objective(req.omega_x, req.omega_theta).await {
        Ok(state) => Json(state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_reset(State(s): State<SessionHandle>, body: Bytes) -> Response {
    let req: ResetRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match s.reset(req.x, req.theta).await {
        Ok(state) => Json(state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_pause(State(s): State<SessionHandle>) -> Response {
    match s.pause().await {
        Ok(state) => Json(state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_resume(State(s): State<SessionHandle>) -> Response {
    match s.resume().await {
        Ok(state) => Json(state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn post_step(State(s): State<SessionHandle>, body: Bytes) -> Response {
    let req: StepRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match s.step(req.ticks).await {
        Ok(frames) => Json(json!({ "frames": frames })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn stream(State(s): State<SessionHandle>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let frames = BroadcastStream::new(s.subscribe()).filter_map(|f| async move {
        f.ok().map(|frame| Ok(Event::default().json_data(frame).expect("frame serializes")))
    });
    Sse::new(frames).keep_alive(KeepAlive::default())
}
