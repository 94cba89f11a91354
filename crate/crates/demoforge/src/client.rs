//! Headless client: HTTP helpers, the scripted recorder, a latency probe and
//! a stream observer.

use std::time::{Duration, Instant};

use demoforge_core::codec::{self, ObjectBuilder};
use demoforge_core::protocol::{
    decode_message, encode_message, ControlAction, ControlCommand, GripperAction, RecordingPhase, TeleopCommand,
    TeleopPayload, PROTOCOL_VERSION,
};
use demoforge_core::sim::GripperState;
use demoforge_core::Message;
use futures::{SinkExt, StreamExt};
use serde_json::{Map, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::script::{Script, ScriptCommand};

/// Ticks between the first observed state and the first scheduled command.
pub const SCRIPT_LEAD_TICKS: u64 = 30;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("server error {code}: {detail}")]
    Server { code: String, detail: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

pub type ClientResult<T> = Result<T, ClientError>;

/// Base URL such as `http://127.0.0.1:8080`.
#[derive(Debug, Clone)]
pub struct Api {
    base: String,
    http: reqwest::Client,
}

impl Api {
    pub fn new(base: &str) -> Self {
        Api { base: base.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn decode(resp: reqwest::Response) -> ClientResult<(u16, Map<String, Value>)> {
        let status = resp.status().as_u16();
        let text = resp.text().await?;
        match codec::parse_object(&text) {
            Ok(obj) => Ok((status, obj)),
            Err(_) => Err(ClientError::Status { status, body: text }),
        }
    }

    pub async fn get(&self, path: &str) -> ClientResult<(u16, Map<String, Value>)> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    pub async fn post(&self, path: &str, body: Map<String, Value>) -> ClientResult<(u16, Map<String, Value>)> {
        let req = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(codec::to_canonical(body));
        Self::decode(req.send().await?).await
    }

    /// POST with custom headers and a raw body.
    pub async fn post_raw(
        &self,
        path: &str,
        headers: &[(&str, &str)],
        body: Vec<u8>,
    ) -> ClientResult<(u16, Map<String, Value>)> {
        let mut req = self.http.post(format!("{}{path}", self.base)).body(body);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        Self::decode(req.send().await?).await
    }

    pub async fn get_bytes(&self, path: &str) -> ClientResult<(u16, Vec<u8>)> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        let status = resp.status().as_u16();
        Ok((status, resp.bytes().await?.to_vec()))
    }

    /// Creates a session and returns its id.
    pub async fn create_session(&self, scene: &str, robot: Option<&str>) -> ClientResult<String> {
        let mut body = ObjectBuilder::new().set("scene", scene);
        if let Some(r) = robot {
            body = body.set("robot", r);
        }
        let (status, obj) = self.post("/api/v1/sessions", body.build()).await?;
        match (status, obj.get("session_id").and_then(Value::as_str)) {
            (201, Some(id)) => Ok(id.to_string()),
            _ => Err(ClientError::Status { status, body: codec::to_canonical(obj) }),
        }
    }

    pub fn ws_url(&self, session_id: &str) -> String {
        let rest = self.base.strip_prefix("http").unwrap_or(&self.base);
        format!("ws{rest}/ws/v1/sessions/{session_id}")
    }

    pub async fn connect(&self, session_id: &str, contributor: &str) -> ClientResult<Conn> {
        Conn::open(&format!("{}?contributor={contributor}", self.ws_url(session_id))).await
    }
}

/// A handshaken protocol connection.
pub struct Conn {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    next_seq: u64,
}

impl Conn {
    pub async fn open(url: &str) -> ClientResult<Conn> {
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        let mut c = Conn { ws, next_seq: 1 };
        c.send(&Message::Hello { protocol_version: PROTOCOL_VERSION, client_kind: "script".into() }).await?;
        match c.recv().await? {
            Message::HelloAck(_) => Ok(c),
            Message::Error(e) => Err(ClientError::Server { code: e.code.as_str().into(), detail: e.detail }),
            other => Err(ClientError::Protocol(format!("expected hello_ack, got `{}`", other.tag()))),
        }
    }

    pub async fn send(&mut self, m: &Message) -> ClientResult<()> {
        let text = encode_message(m).map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.send_text(text).await
    }

    pub async fn send_text(&mut self, text: String) -> ClientResult<()> {
        Ok(self.ws.send(WsMessage::Text(text.into())).await?)
    }

    fn seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub async fn teleop(&mut self, payload: TeleopPayload, at_tick: Option<u64>) -> ClientResult<u64> {
        let client_seq = self.seq();
        self.send(&Message::Teleop(TeleopCommand { client_seq, at_tick, payload })).await?;
        Ok(client_seq)
    }

    pub async fn control(&mut self, action: ControlAction, at_tick: Option<u64>) -> ClientResult<u64> {
        let client_seq = self.seq();
        self.send(&Message::Control(ControlCommand { client_seq, at_tick, action })).await?;
        Ok(client_seq)
    }

    /// Next protocol message; pings and non-text frames are skipped.
    pub async fn recv(&mut self) -> ClientResult<Message> {
        loop {
            match self.ws.next().await {
                None => return Err(ClientError::Protocol("connection closed".into())),
                Some(Err(e)) => return Err(e.into()),
                Some(Ok(WsMessage::Text(t))) => {
                    return decode_message(t.as_str()).map_err(|e| ClientError::Protocol(e.to_string()))
                }
                Some(Ok(WsMessage::Close(_))) => return Err(ClientError::Protocol("connection closed".into())),
                Some(Ok(_)) => continue,
            }
        }
    }

    pub async fn recv_timeout(&mut self, limit: Duration, what: &'static str) -> ClientResult<Message> {
        tokio::time::timeout(limit, self.recv()).await.map_err(|_| ClientError::Timeout(what))?
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

fn server_error(m: Message) -> ClientResult<Message> {
    match m {
        Message::Error(e) => Err(ClientError::Server { code: e.code.as_str().into(), detail: e.detail }),
        m => Ok(m),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRun {
    pub episode_id: String,
    /// Tick of the first recorded frame.
    pub start_tick: u64,
    /// Last recorded tick as reported by the server.
    pub end_tick: u64,
}

/// Records `script` on an open connection: every command is scheduled
/// relative to a start tick chosen [`SCRIPT_LEAD_TICKS`] after the first
/// observed state, so the recording does not depend on network timing.
pub async fn run_script(conn: &mut Conn, script: &Script) -> ClientResult<ScriptRun> {
    let limit = Duration::from_secs(10);
    let first = loop {
        if let Message::State(f) = server_error(conn.recv_timeout(limit, "first state").await?)? {
            break f.tick;
        }
    };
    let base = first + SCRIPT_LEAD_TICKS;
    conn.control(ControlAction::RecordStart { label: script.label.clone() }, Some(base)).await?;
    for step in &script.steps {
        let at = Some(base + step.tick);
        match &step.command {
            ScriptCommand::Teleop(p) => conn.teleop(p.clone(), at).await?,
            ScriptCommand::Reset => conn.control(ControlAction::Reset, at).await?,
        };
    }
    conn.control(ControlAction::RecordStop, Some(base + script.duration)).await?;

    let budget = Duration::from_secs_f64(10.0 + (SCRIPT_LEAD_TICKS + script.duration) as f64 / 30.0);
    let deadline = Instant::now() + budget;
    let mut started: Option<(String, u64)> = None;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match server_error(conn.recv_timeout(left, "recording to stop").await?)? {
            Message::Recording(ev) if ev.phase == RecordingPhase::Started => started = Some((ev.episode_id, ev.tick)),
            Message::Recording(ev) => {
                let Some((id, start_tick)) = started.filter(|(id, _)| *id == ev.episode_id) else {
                    return Err(ClientError::Protocol(format!("stop for unknown episode {}", ev.episode_id)));
                };
                return Ok(ScriptRun { episode_id: id, start_tick, end_tick: ev.tick });
            }
            _ => {}
        }
    }
}

/// Round-trip latency from sending a gripper command to receiving the first
/// state frame that shows it, over `samples` alternating open/close commands.
pub async fn latency_probe(conn: &mut Conn, samples: usize) -> ClientResult<Vec<Duration>> {
    let limit = Duration::from_secs(5);
    let mut current = loop {
        if let Message::State(f) = server_error(conn.recv_timeout(limit, "first state").await?)? {
            break f.gripper;
        }
    };
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (want, action) = match current {
            GripperState::Open => (GripperState::Closed, GripperAction::Close),
            GripperState::Closed => (GripperState::Open, GripperAction::Open),
        };
        let sent = Instant::now();
        conn.teleop(TeleopPayload::Gripper(action), None).await?;
        loop {
            if let Message::State(f) = server_error(conn.recv_timeout(limit, "reflecting state").await?)? {
                if f.gripper == want {
                    out.push(sent.elapsed());
                    current = want;
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// `(seq, tick)` of every state received during `window`.
pub async fn observe(conn: &mut Conn, window: Duration) -> ClientResult<Vec<(u64, u64)>> {
    let end = Instant::now() + window;
    let mut out = Vec::new();
    loop {
        let left = end.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(out);
        }
        match tokio::time::timeout(left, conn.recv()).await {
            Err(_) => return Ok(out),
            Ok(m) => {
                if let Message::State(f) = server_error(m?)? {
                    out.push((f.seq, f.tick));
                }
            }
        }
    }
}

/// Nearest-rank percentile of `samples` (`p` in 0..=100).
pub fn percentile(samples: &[Duration], p: f64) -> Duration {
    let mut v = samples.to_vec();
    v.sort();
    if v.is_empty() {
        return Duration::ZERO;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
