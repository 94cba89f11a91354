//! One real-time simulation loop per session, on its own thread.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use demoforge_core::protocol::{
    encode_message, ControlAction, ControlCommand, ErrorCode, ErrorMessage, RecordingEvent, RecordingPhase, TeleopCommand,
};
use demoforge_core::{Action, ActionEvent, Message, SimFrame, TickRate, World, WorldState};
use tokio::sync::{oneshot, Notify};

use crate::catalog::SceneEntry;
use crate::store::{EpisodeOpen, EpisodeWriter, Manifest, Store, StoreError};

/// States are streamed on every `STREAM_DECIMATION`-th tick.
pub const STREAM_DECIMATION: u64 = 3;
/// Per-connection outbound queue depth before old state frames are dropped.
pub const OUTBOX_DEPTH: usize = 64;
/// Lag, in ticks, after which the loop stops catching up and re-anchors its clock.
pub const MAX_CATCH_UP: u32 = 5;
/// Bound on scheduled-but-unapplied commands per session.
pub const MAX_PENDING: usize = 4096;

/// Outbound messages of one connection. State frames are the only droppable kind.
#[derive(Debug, Default)]
pub struct Outbox {
    queue: Mutex<VecDeque<(bool, Arc<str>)>>,
    notify: Notify,
    closed: AtomicBool,
    dropped: AtomicU64,
}

impl Outbox {
    pub fn push(&self, text: Arc<str>, is_state: bool) {
        let mut q = self.queue.lock().unwrap();
        q.push_back((is_state, text));
        if q.len() > OUTBOX_DEPTH {
            if let Some(i) = q.iter().position(|(s, _)| *s) {
                q.remove(i);
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        drop(q);
        self.notify.notify_one();
    }

    pub fn send(&self, m: &Message) {
        if let Ok(text) = encode_message(m) {
            self.push(text.into(), matches!(m, Message::State(_)));
        }
    }

    pub fn error(&self, code: ErrorCode, detail: impl Into<String>) {
        self.send(&Message::Error(ErrorMessage::new(code, detail)));
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify.notify_one();
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Next message, or `None` once closed and drained.
    pub async fn next(&self) -> Option<Arc<str>> {
        loop {
            if let Some((_, m)) = self.queue.lock().unwrap().pop_front() {
                return Some(m);
            }
            if self.closed.load(Ordering::Acquire) {
                return None;
            }
            self.notify.notified().await;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecordingError {
    #[error("session is already recording")]
    AlreadyRecording,
    #[error("session is not recording")]
    NotRecording,
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type StartReply = Result<(String, u64), RecordingError>;
pub type StopReply = Result<Manifest, RecordingError>;

pub enum Input {
    Join { contributor: String, outbox: Arc<Outbox>, reply: oneshot::Sender<Option<String>> },
    Leave { conn: String },
    Teleop { conn: String, cmd: TeleopCommand },
    Control { conn: String, cmd: ControlCommand },
    HttpStart { label: String, contributor: String, reply: oneshot::Sender<StartReply> },
    HttpStop { reply: oneshot::Sender<StopReply> },
    Shutdown { reply: oneshot::Sender<()> },
}

/// Shared view of a session for request handlers.
#[derive(Debug)]
pub struct SessionHandle {
    pub id: String,
    pub scene: String,
    pub robot: String,
    pub scene_digest: String,
    pub rate: TickRate,
    tx: Mutex<mpsc::Sender<Input>>,
    tick: AtomicU64,
    live: AtomicBool,
    clients: AtomicU64,
    recording: Mutex<Option<String>>,
}

impl SessionHandle {
    pub fn send(&self, input: Input) -> bool {
        self.tx.lock().unwrap().send(input).is_ok()
    }

    pub fn tick(&self) -> u64 {
        self.tick.load(Ordering::Acquire)
    }

    pub fn live(&self) -> bool {
        self.live.load(Ordering::Acquire)
    }

    pub fn clients(&self) -> u64 {
        self.clients.load(Ordering::Acquire)
    }

    pub fn recording(&self) -> Option<String> {
        self.recording.lock().unwrap().clone()
    }

    pub async fn start_recording(&self, label: String, contributor: String) -> StartReply {
        let (reply, rx) = oneshot::channel();
        if !self.send(Input::HttpStart { label, contributor, reply }) {
            return Err(RecordingError::Closed);
        }
        rx.await.unwrap_or(Err(RecordingError::Closed))
    }

    pub async fn stop_recording(&self) -> StopReply {
        let (reply, rx) = oneshot::channel();
        if !self.send(Input::HttpStop { reply }) {
            return Err(RecordingError::Closed);
        }
        rx.await.unwrap_or(Err(RecordingError::Closed))
    }

    pub async fn shutdown(&self) {
        let (reply, rx) = oneshot::channel();
        if self.send(Input::Shutdown { reply }) {
            let _ = rx.await;
        }
    }
}

/// Starts the loop thread for a new session.
pub fn spawn(id: String, scene: &SceneEntry, store: Store) -> std::io::Result<Arc<SessionHandle>> {
    let (world, state) = scene.world();
    let (tx, rx) = mpsc::channel();
    let handle = Arc::new(SessionHandle {
        id: id.clone(),
        scene: scene.spec.name.clone(),
        robot: scene.spec.robot.clone(),
        scene_digest: scene.digest.clone(),
        rate: world.rate(),
        tx: Mutex::new(tx),
        tick: AtomicU64::new(0),
        live: AtomicBool::new(false),
        clients: AtomicU64::new(0),
        recording: Mutex::new(None),
    });
    let lp = Loop {
        handle: handle.clone(),
        scene: scene.clone(),
        world,
        state,
        store,
        clients: BTreeMap::new(),
        next_conn: 1,
        pending: Vec::new(),
        recording: None,
    };
    thread::Builder::new().name(format!("session-{id}")).spawn(move || lp.run(rx))?;
    Ok(handle)
}

enum Source {
    Conn(String),
    Http,
}

enum Work {
    Teleop(TeleopCommand),
    Control(ControlCommand),
    HttpStart { label: String, contributor: String, reply: oneshot::Sender<StartReply> },
    HttpStop { reply: oneshot::Sender<StopReply> },
}

struct Pending {
    source: Source,
    at_tick: Option<u64>,
    work: Work,
}

struct Client {
    contributor: String,
    outbox: Arc<Outbox>,
}

struct Recording {
    writer: EpisodeWriter,
    /// Actions applied at the current boundary, written after its frame.
    buffered: Vec<(ActionEvent, String)>,
}

struct Loop {
    handle: Arc<SessionHandle>,
    scene: SceneEntry,
    world: World,
    state: WorldState,
    store: Store,
    clients: BTreeMap<String, Client>,
    next_conn: u64,
    pending: Vec<Pending>,
    recording: Option<Recording>,
}

impl Loop {
    fn run(mut self, rx: mpsc::Receiver<Input>) {
        let dt = Duration::from_secs_f64(self.world.rate().dt());
        let mut deadline: Option<Instant> = None;
        loop {
            let input = match deadline {
                None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                Some(d) => rx.recv_timeout(d.saturating_duration_since(Instant::now())),
            };
            match input {
                Ok(Input::Shutdown { reply }) => {
                    self.shutdown();
                    let _ = reply.send(());
                    return;
                }
                Ok(input) => self.accept(input),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    self.shutdown();
                    return;
                }
            }
            if deadline.is_none() && self.handle.live() {
                deadline = Some(Instant::now() + dt);
            }
            let Some(d) = deadline.as_mut() else { continue };
            let mut ran = 0;
            while Instant::now() >= *d {
                self.boundary();
                *d += dt;
                ran += 1;
                if ran > MAX_CATCH_UP {
                    let now = Instant::now();
                    if now >= *d {
                        tracing::warn!(session = %self.handle.id, tick = self.state.tick, "loop fell behind, re-anchoring clock");
                        *d = now + dt;
                    }
                    break;
                }
            }
        }
    }

    fn go_live(&self) {
        self.handle.live.store(true, Ordering::Release);
    }

    fn accept(&mut self, input: Input) {
        match input {
            Input::Join { contributor, outbox, reply } => {
                let conn = format!("c{}", self.next_conn);
                self.next_conn += 1;
                self.clients.insert(conn.clone(), Client { contributor, outbox });
                self.handle.clients.store(self.clients.len() as u64, Ordering::Release);
                self.go_live();
                let _ = reply.send(Some(conn));
            }
            Input::Leave { conn } => {
                self.clients.remove(&conn);
                self.handle.clients.store(self.clients.len() as u64, Ordering::Release);
                self.pending.retain(|p| !matches!(&p.source, Source::Conn(c) if *c == conn));
            }
            Input::Teleop { conn, cmd } => self.schedule(Source::Conn(conn), cmd.at_tick, Work::Teleop(cmd)),
            Input::Control { conn, cmd } => self.schedule(Source::Conn(conn), cmd.at_tick, Work::Control(cmd)),
            Input::HttpStart { label, contributor, reply } => {
                self.go_live();
                self.pending.push(Pending { source: Source::Http, at_tick: None, work: Work::HttpStart { label, contributor, reply } });
            }
            Input::HttpStop { reply } if self.recording.is_none() => drop(reply.send(Err(RecordingError::NotRecording))),
            Input::HttpStop { reply } => {
                self.pending.push(Pending { source: Source::Http, at_tick: None, work: Work::HttpStop { reply } })
            }
            Input::Shutdown { .. } => unreachable!("handled by run"),
        }
    }

    fn outbox(&self, source: &Source) -> Option<&Arc<Outbox>> {
        match source {
            Source::Conn(c) => self.clients.get(c).map(|c| &c.outbox),
            Source::Http => None,
        }
    }

    fn reject(&self, source: &Source, code: ErrorCode, detail: String) {
        if let Some(o) = self.outbox(source) {
            o.error(code, detail);
        }
    }

    fn schedule(&mut self, source: Source, at_tick: Option<u64>, work: Work) {
        let next = self.state.tick + 1;
        if let Some(t) = at_tick.filter(|t| *t < next) {
            return self.reject(&source, ErrorCode::StaleCommand, format!("at_tick {t} already passed; next tick is {next}"));
        }
        if self.pending.len() >= MAX_PENDING {
            return self.reject(&source, ErrorCode::OutOfRange, format!("more than {MAX_PENDING} commands pending"));
        }
        self.pending.push(Pending { source, at_tick, work });
    }

    fn broadcast(&self, m: &Message) {
        let Ok(text) = encode_message(m) else { return };
        let text: Arc<str> = text.into();
        let is_state = matches!(m, Message::State(_));
        for c in self.clients.values() {
            c.outbox.push(text.clone(), is_state);
        }
    }

    fn contributor(&self, source: &Source) -> String {
        match source {
            Source::Conn(c) => self.clients.get(c).map_or_else(|| "anonymous".into(), |c| c.contributor.clone()),
            Source::Http => "http".into(),
        }
    }

    /// Applies the commands due at the next tick, steps, records and streams.
    fn boundary(&mut self) {
        let tick = self.state.tick + 1;
        let (due, later): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.pending).into_iter().partition(|p| p.at_tick.is_none_or(|t| t <= tick));
        self.pending = later;
        for p in due {
            self.run_command(p, tick);
        }

        let (next, frame) = match self.world.step(&self.state, self.world.rate()) {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(session = %self.handle.id, "step failed: {e}");
                return;
            }
        };
        self.state = next;
        self.handle.tick.store(tick, Ordering::Release);
        self.record(&frame);
        if tick % STREAM_DECIMATION == 0 {
            self.broadcast(&Message::State(frame));
        }
    }

    fn record(&mut self, frame: &SimFrame) {
        let Some(rec) = self.recording.as_mut() else { return };
        let result = rec.writer.append_frame(frame).and_then(|_| {
            for (ev, who) in rec.buffered.drain(..) {
                rec.writer.append_action(&ev, &who)?;
            }
            Ok(())
        });
        if let Err(e) = result {
            tracing::error!(session = %self.handle.id, "recording aborted: {e}");
            self.recording = None;
            *self.handle.recording.lock().unwrap() = None;
            self.broadcast(&Message::Error(ErrorMessage::new(ErrorCode::SessionClosed, format!("recording aborted: {e}"))));
        }
    }

    fn apply(&mut self, source: &Source, client_seq: Option<u64>, action: Action, tick: u64) {
        self.state = self.world.apply_action(&self.state, &action);
        let who = self.contributor(source);
        if let Some(rec) = self.recording.as_mut() {
            let origin = match source {
                Source::Conn(c) => c.clone(),
                Source::Http => "http".into(),
            };
            rec.buffered.push((ActionEvent { tick, action, client_seq, origin }, who));
        }
    }

    fn run_command(&mut self, p: Pending, tick: u64) {
        let source = p.source;
        match p.work {
            Work::Teleop(cmd) => self.apply(&source, Some(cmd.client_seq), Action::Teleop(cmd.payload), tick),
            Work::Control(cmd) => match cmd.action {
                ControlAction::Reset => self.apply(&source, Some(cmd.client_seq), Action::Reset, tick),
                ControlAction::RecordStart { label } => {
                    let who = self.contributor(&source);
                    match self.start(&label, &who, tick) {
                        Ok(_) => {}
                        Err(RecordingError::AlreadyRecording) => {
                            self.reject(&source, ErrorCode::ProtocolViolation, "already recording".into())
                        }
                        Err(e) => self.reject(&source, ErrorCode::SessionClosed, e.to_string()),
                    }
                }
                ControlAction::RecordStop => {
                    if let Err(e) = self.stop() {
                        self.reject(&source, ErrorCode::ProtocolViolation, e.to_string());
                    }
                }
            },
            Work::HttpStart { label, contributor, reply } => {
                let _ = reply.send(self.start(&label, &contributor, tick));
            }
            Work::HttpStop { reply } => {
                let _ = reply.send(self.stop());
            }
        }
    }

    /// Opens an episode whose first frame is `tick`, starting from the current state.
    fn start(&mut self, label: &str, contributor: &str, tick: u64) -> StartReply {
        if self.recording.is_some() {
            return Err(RecordingError::AlreadyRecording);
        }
        let mut writer = self.store.open_episode(EpisodeOpen {
            session_id: &self.handle.id,
            scene: &self.scene,
            label,
            start_tick: tick,
            start_state: &self.state,
            rate: self.world.rate(),
        })?;
        writer.add_contributor(contributor);
        let id = writer.episode_id().to_string();
        self.recording = Some(Recording { writer, buffered: Vec::new() });
        *self.handle.recording.lock().unwrap() = Some(id.clone());
        tracing::info!(session = %self.handle.id, episode = %id, tick, "recording started");
        self.broadcast(&Message::Recording(RecordingEvent { episode_id: id.clone(), phase: RecordingPhase::Started, tick }));
        Ok((id, tick))
    }

    /// Closes the episode after the last produced frame. Actions already
    /// applied at this boundary belong to no recorded frame and are not kept.
    fn stop(&mut self) -> StopReply {
        let mut rec = self.recording.take().ok_or(RecordingError::NotRecording)?;
        *self.handle.recording.lock().unwrap() = None;
        let manifest = rec.writer.finalize()?;
        tracing::info!(session = %self.handle.id, episode = %manifest.episode_id, frames = manifest.frame_count, "recording stopped");
        self.broadcast(&Message::Recording(RecordingEvent {
            episode_id: manifest.episode_id.clone(),
            phase: RecordingPhase::Stopped,
            tick: manifest.end_tick,
        }));
        Ok(manifest)
    }

    fn shutdown(&mut self) {
        if self.recording.is_some() {
            if let Err(e) = self.stop() {
                tracing::error!(session = %self.handle.id, "finalize on shutdown failed: {e}");
            }
        }
        for p in self.pending.drain(..) {
            match p.work {
                Work::HttpStart { reply, .. } => drop(reply.send(Err(RecordingError::Closed))),
                Work::HttpStop { reply } => drop(reply.send(Err(RecordingError::Closed))),
                _ => {}
            }
        }
        for c in self.clients.values() {
            c.outbox.error(ErrorCode::SessionClosed, "server shutting down");
            c.outbox.close();
        }
        self.handle.live.store(false, Ordering::Release);
    }
}
