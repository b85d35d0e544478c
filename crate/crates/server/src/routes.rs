use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::{AcceptAdvice, ApiError, AppState, Command, CreateSession, EndClient, Frame, PostMessage, PostTag, UseResource};
use assist_core::orchestrator::OrchestratorError;

type Shared = Arc<AppState>;

impl ApiError {
    fn status(&self) -> StatusCode {
        use OrchestratorError as O;
        match self {
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::UnknownStoryboard(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::ShuttingDown => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Orchestrator(e) => match e {
                O::UnknownClient(_) | O::UnknownAdvice(_) => StatusCode::NOT_FOUND,
                O::SessionClosed(_) | O::IncompleteLog(_) => StatusCode::CONFLICT,
                O::TooManyClients { .. }
                | O::NoClients
                | O::DuplicateClient(_)
                | O::MessageIndexOutOfRange { .. }
                | O::ItemNotInAdvice { .. }
                | O::InvalidActor(_)
                | O::Vector(_) => StatusCode::UNPROCESSABLE_ENTITY,
                O::MissingModelBundle { .. } | O::SchemaMismatch { .. } => StatusCode::SERVICE_UNAVAILABLE,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }

    fn body(&self) -> serde_json::Value {
        json!({ "error": self.kind(), "message": self.to_string() })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Serialize)]
struct Events {
    events: Vec<Frame>,
}

#[derive(Deserialize)]
struct From {
    #[serde(default)]
    from: usize,
}

pub(crate) fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/messages", post(message))
        .route("/sessions/{id}/tags", post(tag))
        .route("/sessions/{id}/advice", get(advice))
        .route("/sessions/{id}/advice/{advice_id}/accept", post(accept))
        .route("/sessions/{id}/resources", post(resource))
        .route("/sessions/{id}/end", post(end))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

async fn health(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "mode": s.config().mode,
        "sessions": s.session_ids().len(),
    }))
}

async fn list(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": s.session_ids() }))
}

async fn create(State(s): State<Shared>, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let (id, frames) = s.create(req)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "events": frames }))))
}

async fn summary(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    s.summary(&id).map(Json)
}

async fn message(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<PostMessage>) -> ApiResult<Events> {
    Ok(Json(Events { events: s.post_message(&id, req)? }))
}

async fn tag(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<PostTag>) -> ApiResult<Events> {
    Ok(Json(Events { events: s.record_tag(&id, req)? }))
}

async fn advice(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    s.advice(&id).map(Json)
}

async fn accept(
    State(s): State<Shared>,
    Path((id, advice_id)): Path<(String, String)>,
    Json(req): Json<AcceptAdvice>,
) -> ApiResult<Events> {
    Ok(Json(Events { events: s.accept_advice(&id, &advice_id, &req.item_id)? }))
}

async fn resource(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<UseResource>) -> ApiResult<Events> {
    Ok(Json(Events { events: s.resource_use(&id, req)? }))
}

async fn end(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<EndClient>) -> ApiResult<Events> {
    Ok(Json(Events { events: s.end(&id, req)? }))
}

async fn events(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<From>) -> ApiResult<Events> {
    Ok(Json(Events { events: s.events(&id, q.from)? }))
}

async fn metrics(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<crate::MetricsReport> {
    s.metrics(&id).map(Json)
}

async fn stream(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<From>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    // Resolve the session before upgrading so unknown ids get a plain 404.
    s.events(&id, usize::MAX)?;
    Ok(ws.on_upgrade(move |socket| pump(s, id, q.from, socket)))
}

/// Frames pushed on the stream.
#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Push<'a> {
    Event(&'a Frame),
    Error { error: &'static str, message: String },
}

async fn send(socket: &mut WebSocket, push: &Push<'_>) -> bool {
    let text = serde_json::to_string(push).expect("push frames serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

/// Replays the log from `from`, then forwards live events and applies
/// commands sent by the console until either side goes away.
async fn pump(state: Shared, id: String, from: usize, mut socket: WebSocket) {
    let mut stop = state.stop_signal();
    let Ok((backlog, mut rx)) = state.subscribe(&id, from) else {
        return;
    };
    let mut next = from;
    for f in &backlog {
        if !send(&mut socket, &Push::Event(f)).await {
            return;
        }
        next = f.seq + 1;
    }
    loop {
        tokio::select! {
            received = rx.recv() => match received {
                Ok(f) => {
                    if f.seq < next {
                        continue;
                    }
                    next = f.seq + 1;
                    if !send(&mut socket, &Push::Event(&f)).await {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    // Catch up from the session itself.
                    let Ok(missed) = state.events(&id, next) else { return };
                    for f in &missed {
                        if !send(&mut socket, &Push::Event(f)).await {
                            return;
                        }
                        next = f.seq + 1;
                    }
                }
                Err(RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let outcome = serde_json::from_str::<Command>(&text)
                        .map_err(|e| ("bad_command", e.to_string()))
                        .and_then(|cmd| state.apply(&id, cmd).map_err(|e| (e.kind(), e.to_string())));
                    // Successful commands come back through the broadcast.
                    if let Err((error, message)) = outcome {
                        if !send(&mut socket, &Push::Error { error, message }).await {
                            return;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            _ = stop.changed() => {
                // Deliver the shutdown markers before closing.
                while let Ok(f) = rx.try_recv() {
                    if f.seq >= next {
                        next = f.seq + 1;
                        if !send(&mut socket, &Push::Event(&f)).await {
                            return;
                        }
                    }
                }
                break;
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
