use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message as WsMessage, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use demoforge_core::protocol::{
    decode_message, encode_message, negotiate, ErrorCode, ErrorMessage, SessionParams, SUPPORTED_VERSIONS,
};
use demoforge_core::Message;
use futures::{SinkExt, StreamExt};
use tokio::sync::oneshot;

use super::session::{Input, Outbox, SessionHandle};
use super::{stream_rate_hz, AppState};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

pub async fn upgrade(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    ws: WebSocketUpgrade,
) -> Response {
    let Some(session) = app.session(&id) else {
        return (StatusCode::NOT_FOUND, format!("unknown session `{id}`")).into_response();
    };
    let contributor = headers
        .get("x-contributor")
        .and_then(|v| v.to_str().ok())
        .or(q.get("contributor").map(String::as_str))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or("anonymous")
        .to_string();
    ws.on_upgrade(move |socket| connection(socket, session, contributor))
}

async fn send_now(socket: &mut WebSocket, m: &Message) -> bool {
    match encode_message(m) {
        Ok(text) => socket.send(WsMessage::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

async fn refuse(mut socket: WebSocket, e: ErrorMessage) {
    let reason = e.code.as_str();
    let _ = send_now(&mut socket, &Message::Error(e.clone())).await;
    let _ = socket.send(WsMessage::Close(Some(CloseFrame { code: 1008, reason: Utf8Bytes::from(reason) }))).await;
}

async fn connection(mut socket: WebSocket, session: Arc<SessionHandle>, contributor: String) {
    let first = match tokio::time::timeout(HELLO_TIMEOUT, socket.recv()).await {
        Ok(Some(Ok(WsMessage::Text(t)))) => t,
        Ok(Some(Ok(_))) => {
            return refuse(socket, ErrorMessage::new(ErrorCode::ProtocolViolation, "expected a text hello")).await
        }
        _ => return,
    };
    let first = match decode_message(first.as_str()) {
        Ok(m) => m,
        Err(e) => return refuse(socket, ErrorMessage::new(ErrorCode::from(&e), e.to_string())).await,
    };
    let params = SessionParams {
        session_id: session.id.clone(),
        scene_digest: session.scene_digest.clone(),
        dt: session.rate.dt(),
        stream_rate_hz: stream_rate_hz(session.rate.hz()),
    };
    let ack = match negotiate(&first, SUPPORTED_VERSIONS, &params) {
        Ok(a) => a,
        Err(e) => return refuse(socket, e).await,
    };
    if !send_now(&mut socket, &Message::HelloAck(ack)).await {
        return;
    }
    let outbox = Arc::new(Outbox::default());
    let (reply, joined) = oneshot::channel();
    if !session.send(Input::Join { contributor, outbox: outbox.clone(), reply }) {
        return refuse(socket, ErrorMessage::new(ErrorCode::SessionClosed, "session closed")).await;
    }
    let Ok(Some(conn)) = joined.await else {
        return refuse(socket, ErrorMessage::new(ErrorCode::SessionClosed, "session closed")).await;
    };

    let (mut tx, mut rx) = socket.split();
    let writer_box = outbox.clone();
    let writer = tokio::spawn(async move {
        while let Some(text) = writer_box.next().await {
            if tx.send(WsMessage::Text(Utf8Bytes::from(&*text))).await.is_err() {
                return;
            }
        }
        let _ = tx.send(WsMessage::Close(Some(CloseFrame { code: 1001, reason: Utf8Bytes::from("session closed") }))).await;
    });

    let mut last_seq: Option<u64> = None;
    while let Some(Ok(msg)) = rx.next().await {
        let text = match msg {
            WsMessage::Text(t) => t,
            WsMessage::Close(_) => break,
            WsMessage::Binary(_) => {
                outbox.error(ErrorCode::ProtocolViolation, "binary frames are not part of the protocol");
                continue;
            }
            _ => continue,
        };
        let m = match decode_message(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                outbox.error(ErrorCode::from(&e), e.to_string());
                continue;
            }
        };
        if let Some(seq) = m.client_seq() {
            if last_seq.is_some_and(|l| seq <= l) {
                outbox.error(ErrorCode::StaleCommand, format!("client_seq {seq} not above {}", last_seq.unwrap_or(0)));
                continue;
            }
            last_seq = Some(seq);
        }
        let input = match m {
            Message::Teleop(cmd) => Input::Teleop { conn: conn.clone(), cmd },
            Message::Control(cmd) => Input::Control { conn: conn.clone(), cmd },
            Message::Ping { nonce } => {
                outbox.send(&Message::Pong { nonce });
                continue;
            }
            other => {
                outbox.error(ErrorCode::ProtocolViolation, format!("unexpected `{}` from client", other.tag()));
                continue;
            }
        };
        if !session.send(input) {
            break;
        }
    }
    session.send(Input::Leave { conn });
    outbox.close();
    let _ = writer.await;
}
