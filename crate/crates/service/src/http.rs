use std::convert::Infallible;
use std::path::Path;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use vbci_core::session::{self, SessionEvent, EVENT_LOG, SESSION_RECORD};

use crate::state::valid_id;
use crate::{OperatorCommand, ServiceState};

/// Machine-readable schema of the wire protocol.
pub const PROTOCOL_SCHEMA: &str = include_str!("../../../docs/protocol.schema.json");

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/command", post(command))
        .route("/status", get(status))
        .route("/ws", get(websocket))
        .route("/events", get(sse))
        .route("/schema", get(schema))
        .route("/reports", get(list_reports))
        .route("/reports/{session}/{file}", get(report_file))
        .with_state(state)
}

async fn command(State(state): State<ServiceState>, body: String) -> (StatusCode, Response) {
    let reply = match serde_json::from_str::<OperatorCommand>(&body) {
        Ok(cmd) => tokio::task::spawn_blocking(move || state.apply(cmd))
            .await
            .expect("command handler does not panic"),
        Err(e) => {
            let reply = state.reject_malformed(format!("malformed command: {e}"));
            return (StatusCode::BAD_REQUEST, Json(reply).into_response());
        }
    };
    let code = if reply.ok { StatusCode::OK } else { StatusCode::CONFLICT };
    (code, Json(reply).into_response())
}

async fn status(State(state): State<ServiceState>) -> impl IntoResponse {
    Json(state.status())
}

async fn schema() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/schema+json")], PROTOCOL_SCHEMA)
}

#[derive(Debug, Default, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_seq: Option<u64>,
}

/// Past events from `from_seq` on, then live ones. The receiver ends when
/// the client falls more than the configured buffer behind.
fn subscribe(state: &ServiceState, from_seq: u64) -> (Vec<SessionEvent>, mpsc::Receiver<SessionEvent>) {
    let (tx, rx) = mpsc::channel(state.config().client_buffer.max(1));
    let history = state
        .bus()
        .subscribe_from(from_seq, move |e| tx.try_send(e.clone()).is_ok());
    (history, rx)
}

fn event_stream(state: &ServiceState, from_seq: u64) -> impl Stream<Item = SessionEvent> + Send + 'static {
    let (history, rx) = subscribe(state, from_seq);
    let live = stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (e, rx)) });
    stream::iter(history).chain(live)
}

async fn websocket(State(state): State<ServiceState>, Query(q): Query<StreamQuery>, ws: WebSocketUpgrade) -> Response {
    let from = q.from_seq.unwrap_or(0);
    ws.on_upgrade(move |socket| push_events(socket, state, from))
}

async fn push_events(mut socket: WebSocket, state: ServiceState, from_seq: u64) {
    let mut events = Box::pin(event_stream(&state, from_seq));
    loop {
        tokio::select! {
            next = events.next() => {
                let Some(ev) = next else {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                };
                let text = serde_json::to_string(&ev).expect("events serialize");
                if socket.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn sse(
    State(state): State<ServiceState>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|last| last + 1);
    let from = resume.or(q.from_seq).unwrap_or(0);
    let events = event_stream(&state, from).map(|ev| {
        Ok(Event::default()
            .id(ev.seq.to_string())
            .event(ev.event.name())
            .data(serde_json::to_string(&ev).expect("events serialize")))
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

#[derive(Debug, Serialize)]
struct ReportEntry {
    session: String,
    files: Vec<String>,
}

async fn list_reports(State(state): State<ServiceState>) -> Response {
    let root = state.data_dir().to_path_buf();
    let listing = tokio::task::spawn_blocking(move || list_sessions(&root))
        .await
        .expect("listing does not panic");
    match listing {
        Ok(list) => Json(list).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn list_sessions(root: &Path) -> std::io::Result<Vec<ReportEntry>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let dir = entry.path();
        if !dir.join(EVENT_LOG).exists() {
            continue;
        }
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|f| f.ok())
            .map(|f| f.file_name().to_string_lossy().into_owned())
            .filter(|f| servable(f))
            .collect();
        files.push("report.json".into());
        files.sort();
        out.push(ReportEntry {
            session: entry.file_name().to_string_lossy().into_owned(),
            files,
        });
    }
    out.sort_by(|a, b| a.session.cmp(&b.session));
    Ok(out)
}

fn servable(file: &str) -> bool {
    file == EVENT_LOG
        || file == SESSION_RECORD
        || (file.starts_with("run") && file.ends_with(".json") && valid_id(file.trim_end_matches(".json")))
}

async fn report_file(
    State(state): State<ServiceState>,
    UrlPath((session, file)): UrlPath<(String, String)>,
) -> Response {
    if !valid_id(&session) || !(servable(&file) || file == "report.json") {
        return StatusCode::NOT_FOUND.into_response();
    }
    let dir = state.data_dir().join(&session);
    let seed = state.config().seed;
    let n_perm = state.config().chance_permutations;
    let result = tokio::task::spawn_blocking(move || -> Result<(&'static str, String), String> {
        if file == "report.json" {
            let (header, events) = session::read_event_log(&dir.join(EVENT_LOG)).map_err(|e| e.to_string())?;
            let report = session::evaluate_log(&header, &events, n_perm, seed).map_err(|e| e.to_string())?;
            return Ok((
                "application/json",
                serde_json::to_string_pretty(&report).expect("reports serialize"),
            ));
        }
        let body = std::fs::read_to_string(dir.join(&file)).map_err(|e| e.to_string())?;
        let kind = if file.ends_with(".jsonl") {
            "application/x-ndjson"
        } else {
            "application/json"
        };
        Ok((kind, body))
    })
    .await
    .expect("report task does not panic");
    match result {
        Ok((kind, body)) => ([(header::CONTENT_TYPE, kind)], body).into_response(),
        Err(e) => (StatusCode::NOT_FOUND, e).into_response(),
    }
}
