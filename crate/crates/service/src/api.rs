use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use cshi_core::harness::HarnessError;

use crate::events::Control;
use crate::session::{CreateSession, ProfileEdit, ServiceError, SessionService};

#[derive(Clone)]
struct AppState {
    service: Arc<SessionService>,
    token: Option<Arc<str>>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            ServiceError::SessionExists(_) => (StatusCode::CONFLICT, "session_exists"),
            ServiceError::EditDuringTurn => (StatusCode::CONFLICT, "edit_during_turn"),
            ServiceError::NotInTakeover => (StatusCode::CONFLICT, "not_in_takeover"),
            ServiceError::NotUserTurn => (StatusCode::CONFLICT, "not_user_turn"),
            ServiceError::UnknownItem(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_item"),
            ServiceError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            ServiceError::Engine(HarnessError::EditLeak) => (StatusCode::UNPROCESSABLE_ENTITY, "edit_mentions_target"),
            ServiceError::Engine(HarnessError::Finished) => (StatusCode::CONFLICT, "session_finished"),
            ServiceError::Engine(HarnessError::Invalid(_)) => (StatusCode::BAD_REQUEST, "invalid_request"),
            ServiceError::Engine(HarnessError::Backend(_) | HarnessError::Crs(_)) => {
                (StatusCode::BAD_GATEWAY, "upstream_failed")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({"error": code, "message": self.to_string()}))).into_response()
    }
}

/// The service's HTTP interface. With a token, every request must carry
/// `Authorization: Bearer <token>`.
pub fn router(service: Arc<SessionService>, token: Option<String>) -> Router {
    let state = AppState {
        service,
        token: token.map(Arc::from),
    };
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(fetch))
        .route("/sessions/{id}/profile", patch(edit_profile))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/control", post(set_control))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/events", get(events))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return (StatusCode::UNAUTHORIZED, Json(json!({"error": "unauthorized"}))).into_response();
        }
    }
    next.run(req).await
}

async fn create(State(state): State<AppState>, Json(req): Json<CreateSession>) -> Result<Response, ServiceError> {
    let service = state.service.clone();
    let snapshot = tokio::task::spawn_blocking(move || service.create(req))
        .await
        .map_err(|_| ServiceError::Stopped)??;
    Ok((StatusCode::CREATED, Json(snapshot)).into_response())
}

async fn list(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"sessions": state.service.ids()}))
}

async fn fetch(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.service.get(&id)?.snapshot()).into_response())
}

async fn edit_profile(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(edit): Json<ProfileEdit>,
) -> Result<Response, ServiceError> {
    let snapshot = state.service.get(&id)?.edit_profile(edit).await?;
    Ok(Json(snapshot).into_response())
}

#[derive(Deserialize)]
struct PostMessage {
    text: String,
    #[serde(default)]
    inject: bool,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> Result<Response, ServiceError> {
    let result = state.service.get(&id)?.post_message(body.text, body.inject).await?;
    Ok(Json(result).into_response())
}

#[derive(Deserialize)]
struct SetControl {
    control: Control,
}

async fn set_control(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<SetControl>,
) -> Result<Response, ServiceError> {
    Ok(Json(state.service.get(&id)?.set_control(body.control).await?).into_response())
}

#[derive(Deserialize, Default)]
struct Advance {
    /// Turns to run; all remaining when absent.
    #[serde(default)]
    steps: Option<u32>,
}

async fn advance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<Advance>>,
) -> Result<Response, ServiceError> {
    let steps = body.map(|Json(b)| b.steps).unwrap_or_default();
    Ok(Json(state.service.get(&id)?.advance(steps).await?).into_response())
}

#[derive(Deserialize)]
struct EventQuery {
    /// First seq to deliver; 1 replays the whole log.
    #[serde(default = "first")]
    from: u64,
}

fn first() -> u64 {
    1
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    let handle = state.service.get(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, handle, q.from)))
}

async fn stream_events(mut socket: WebSocket, handle: crate::session::SessionHandle, from: u64) {
    let mut sub = handle.subscribe(from);
    let mut last = from.saturating_sub(1);
    for event in sub.backlog.drain(..) {
        last = event.seq;
        if send(&mut socket, &event).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            received = sub.live.recv() => match received {
                Ok(event) if event.seq <= last => {}
                Ok(event) => {
                    last = event.seq;
                    if send(&mut socket, &event).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    let _ = socket
                        .send(WsMessage::Close(Some(axum::extract::ws::CloseFrame {
                            code: 1008,
                            reason: format!("fell behind after seq {last}; reconnect with from={}", last + 1).into(),
                        })))
                        .await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                // Clients only read; pings are answered by the transport.
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn send(socket: &mut WebSocket, event: &crate::events::Event) -> Result<(), axum::Error> {
    let text = serde_json::to_string(event).expect("event serializes");
    socket.send(WsMessage::Text(text.into())).await
}
