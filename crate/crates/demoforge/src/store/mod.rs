//! Episode store.
//!
//! ```text
//! <data_dir>/episodes/<episode_id>/
//!     scene.copy        canonical scene copy (robot + scene documents)
//!     meta.provisional  identity, start tick and start state; written at open
//!     frames.log        one `state` message per recorded tick
//!     actions.log       applied actions, by tick
//!     annotations.log   language annotations
//!     media.log         media attached to the episode
//!     meta              final manifest; written once, atomically
//! <data_dir>/media/blobs/<sha256>      content-addressed bytes
//! <data_dir>/media/records/<sha256>    media record
//! <data_dir>/sessions/<session_id>/    annotations.log, media.log for session targets
//! ```
//!
//! Every log is LF-terminated canonical-form records, append-only.

mod annotation;
mod export;
mod media;
mod replay;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use demoforge_core::codec::{self, CodecError, Fields, ObjectBuilder};
use demoforge_core::protocol::encode_frame;
use demoforge_core::record::{state_from_value, state_to_value};
use demoforge_core::{ActionEvent, SimFrame, TickRate, WorldState};
use serde_json::{Map, Value};

use crate::catalog::SceneEntry;

pub use annotation::{check_annotation, new_annotation_id, parse_anchor, AnnotationKind, AnnotationRecord};
pub use export::{export_dataset, ExportFilter, ExportSummary};
pub use media::{media_id_for, MediaMetadata, MediaRecord, MediaSink, MediaSource};
pub use replay::{replay_episode, ReplayError, ReplayOutcome};
pub use validate::{validate_episode, ValidationReport};

pub const FRAMES_LOG: &str = "frames.log";
pub const ACTIONS_LOG: &str = "actions.log";
pub const ANNOTATIONS_LOG: &str = "annotations.log";
pub const MEDIA_LOG: &str = "media.log";
pub const SCENE_COPY: &str = "scene.copy";
pub const META: &str = "meta";
pub const META_PROVISIONAL: &str = "meta.provisional";
/// Frames buffered between flushes.
pub const FLUSH_EVERY: u64 = 60;
const STAGING_PREFIX: &str = ".staging-";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("session `{0}` already has an open episode")]
    AlreadyOpen(String),
    #[error("episode is finalized")]
    Finalized,
    #[error("frame tick {got} does not follow {expected}")]
    TickDiscontinuity { expected: u64, got: u64 },
    #[error("action tick {tick} outside recorded range [{lo}, {hi}]")]
    ActionOutOfRange { tick: u64, lo: u64, hi: i128 },
    #[error("unknown episode `{0}`")]
    UnknownEpisode(String),
    #[error("{0}")]
    Invalid(String),
    #[error("upload exceeds the {cap}-byte cap")]
    TooLarge { cap: u64 },
    #[error("declared digest {declared} does not match content digest {actual}")]
    DigestMismatch { declared: String, actual: String },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: CodecError },
}

pub type StoreResult<T> = Result<T, StoreError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to `path` via a synced temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> StoreResult<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        sync_dir(parent);
    }
    Ok(())
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

pub(crate) fn append_line(path: &Path, line: &str) -> StoreResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    f.write_all(&buf).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Lines of an append-only log. A final segment without LF is a torn write.
pub(crate) struct LogLines {
    /// (1-based line number, bytes without LF)
    pub lines: Vec<(usize, Vec<u8>)>,
    pub torn: Option<usize>,
}

pub(crate) fn read_log(path: &Path) -> io::Result<LogLines> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut lines = Vec::new();
    let mut torn = None;
    let mut start = 0;
    let mut n = 0;
    while start < bytes.len() {
        n += 1;
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(i) => {
                lines.push((n, bytes[start..start + i].to_vec()));
                start += i + 1;
            }
            None => {
                torn = Some(n);
                break;
            }
        }
    }
    Ok(LogLines { lines, torn })
}

pub(crate) fn line_text(bytes: &[u8]) -> Result<&str, CodecError> {
    std::str::from_utf8(bytes).map_err(|_| CodecError::schema("record is not UTF-8"))
}

/// Identity and starting point of an episode, written before any record.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionalMeta {
    pub episode_id: String,
    pub session_id: String,
    pub scene: String,
    pub robot: String,
    pub scene_digest: String,
    pub label: String,
    pub start_tick: u64,
    pub tick_hz: u32,
    pub created_at: i64,
    pub start_state: WorldState,
}

impl ProvisionalMeta {
    pub fn rate(&self) -> TickRate {
        TickRate::new(self.tick_hz)
    }

    fn encode(&self) -> String {
        ObjectBuilder::new()
            .set("created_at", self.created_at)
            .set("episode_id", self.episode_id.as_str())
            .set("label", self.label.as_str())
            .set("robot", self.robot.as_str())
            .set("scene", self.scene.as_str())
            .set("scene_digest", self.scene_digest.as_str())
            .set("session_id", self.session_id.as_str())
            .set("start_state", state_to_value(&self.start_state).expect("world state is finite"))
            .set("start_tick", self.start_tick)
            .set("tick_hz", self.tick_hz)
            .encode()
    }

    pub fn decode(text: &str) -> Result<Self, CodecError> {
        let mut f = Fields::new(codec::parse_object(text)?, "meta.provisional");
        let created_at = f.take("created_at")?.as_i64().ok_or_else(|| CodecError::schema("created_at: expected integer"))?;
        let m = ProvisionalMeta {
            episode_id: f.string("episode_id")?,
            label: f.string("label")?,
            robot: f.string("robot")?,
            scene: f.string("scene")?,
            scene_digest: f.string("scene_digest")?,
            session_id: f.string("session_id")?,
            start_state: state_from_value(f.take("start_state")?)?,
            start_tick: f.u64("start_tick")?,
            tick_hz: u32::try_from(f.u64("tick_hz")?).map_err(|_| CodecError::schema("tick_hz: too large"))?,
            created_at,
        };
        f.finish()?;
        if m.tick_hz == 0 {
            return Err(CodecError::schema("tick_hz: must be positive"));
        }
        Ok(m)
    }
}

/// Episode manifest. `end_tick = start_tick + frame_count − 1`, so an empty
/// episode has `end_tick = start_tick − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub episode_id: String,
    pub session_id: String,
    pub scene: String,
    pub robot: String,
    pub scene_digest: String,
    pub label: String,
    pub start_tick: u64,
    pub end_tick: u64,
    pub tick_hz: u32,
    pub frame_count: u64,
    pub action_count: u64,
    pub contributors: Vec<String>,
    /// More than one connection's commands were recorded.
    pub multi_writer: bool,
    pub finalized: bool,
    /// Closed by crash recovery rather than by a stop.
    pub recovered: bool,
    pub created_at: i64,
}

impl Manifest {
    pub fn dt(&self) -> f64 {
        TickRate::new(self.tick_hz).dt()
    }

    pub fn to_object(&self) -> Map<String, Value> {
        ObjectBuilder::new()
            .set("action_count", self.action_count)
            .set("contributors", self.contributors.iter().map(|c| Value::from(c.as_str())).collect::<Vec<_>>())
            .set("created_at", self.created_at)
            .set("dt", self.dt())
            .set("end_tick", self.end_tick)
            .set("episode_id", self.episode_id.as_str())
            .set("finalized", self.finalized)
            .set("frame_count", self.frame_count)
            .set("label", self.label.as_str())
            .set("multi_writer", self.multi_writer)
            .set("recovered", self.recovered)
            .set("robot", self.robot.as_str())
            .set("scene", self.scene.as_str())
            .set("scene_digest", self.scene_digest.as_str())
            .set("session_id", self.session_id.as_str())
            .set("start_tick", self.start_tick)
            .set("tick_hz", self.tick_hz)
            .build()
    }

    pub fn encode(&self) -> String {
        codec::to_canonical(self.to_object())
    }

    pub fn decode(text: &str) -> Result<Self, CodecError> {
        let mut f = Fields::new(codec::parse_object(text)?, "meta");
        let created_at = f.take("created_at")?.as_i64().ok_or_else(|| CodecError::schema("created_at: expected integer"))?;
        let _dt = f.f64("dt")?;
        let m = Manifest {
            action_count: f.u64("action_count")?,
            contributors: f.strings("contributors")?,
            end_tick: f.u64("end_tick")?,
            episode_id: f.string("episode_id")?,
            finalized: f.bool("finalized")?,
            frame_count: f.u64("frame_count")?,
            label: f.string("label")?,
            multi_writer: f.bool("multi_writer")?,
            recovered: f.bool("recovered")?,
            robot: f.string("robot")?,
            scene: f.string("scene")?,
            scene_digest: f.string("scene_digest")?,
            session_id: f.string("session_id")?,
            start_tick: f.u64("start_tick")?,
            tick_hz: u32::try_from(f.u64("tick_hz")?).map_err(|_| CodecError::schema("tick_hz: too large"))?,
            created_at,
        };
        f.finish()?;
        Ok(m)
    }

    fn from_provisional(p: &ProvisionalMeta, frame_count: u64, action_count: u64) -> Self {
        Manifest {
            episode_id: p.episode_id.clone(),
            session_id: p.session_id.clone(),
            scene: p.scene.clone(),
            robot: p.robot.clone(),
            scene_digest: p.scene_digest.clone(),
            label: p.label.clone(),
            start_tick: p.start_tick,
            end_tick: (p.start_tick + frame_count).saturating_sub(1),
            tick_hz: p.tick_hz,
            frame_count,
            action_count,
            contributors: Vec::new(),
            multi_writer: false,
            finalized: false,
            recovered: false,
            created_at: p.created_at,
        }
    }
}

/// What a recording session needs to open an episode.
#[derive(Debug, Clone)]
pub struct EpisodeOpen<'a> {
    pub session_id: &'a str,
    pub scene: &'a SceneEntry,
    pub label: &'a str,
    pub start_tick: u64,
    pub start_state: &'a WorldState,
    pub rate: TickRate,
}

#[derive(Debug, Default)]
struct Shared {
    /// Sessions with an open writer.
    open_sessions: Mutex<BTreeSet<String>>,
    /// Last appended frame tick of each open episode.
    live: Mutex<BTreeMap<String, Arc<AtomicU64>>>,
    /// Serialises annotation and media appends.
    ingest: Mutex<()>,
}

/// Handle to a data directory. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    shared: Arc<Shared>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into(), shared: Arc::default() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.root.join("episodes")
    }

    pub fn episode_dir(&self, id: &str) -> PathBuf {
        self.episodes_dir().join(id)
    }

    pub(crate) fn media_dir(&self) -> PathBuf {
        self.root.join("media")
    }

    pub(crate) fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    /// Episode ids present on disk, sorted (ids sort by creation time).
    pub fn episode_ids(&self) -> StoreResult<Vec<String>> {
        let dir = self.episodes_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| !n.starts_with('.'))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn has_episode(&self, id: &str) -> bool {
        valid_id(id) && self.episode_dir(id).join(META_PROVISIONAL).is_file()
    }

    /// Creates the episode skeleton (scene copy and provisional manifest first,
    /// then empty logs) in a staging directory and renames it into place.
    pub fn open_episode(&self, req: EpisodeOpen<'_>) -> StoreResult<EpisodeWriter> {
        {
            let mut open = self.shared.open_sessions.lock().unwrap();
            if !open.insert(req.session_id.to_string()) {
                return Err(StoreError::AlreadyOpen(req.session_id.to_string()));
            }
        }
        let release = SessionRelease { shared: self.shared.clone(), session_id: req.session_id.to_string() };
        let created_at = crate::now_ms();
        let episode_id = new_episode_id();
        let meta = ProvisionalMeta {
            episode_id: episode_id.clone(),
            session_id: req.session_id.to_string(),
            scene: req.scene.spec.name.clone(),
            robot: req.scene.robot.name().to_string(),
            scene_digest: req.scene.digest.clone(),
            label: req.label.to_string(),
            start_tick: req.start_tick,
            tick_hz: req.rate.hz(),
            created_at,
            start_state: req.start_state.clone(),
        };

        let episodes = self.episodes_dir();
        fs::create_dir_all(&episodes).map_err(io_err(&episodes))?;
        let staging = episodes.join(format!("{STAGING_PREFIX}{episode_id}"));
        fs::create_dir(&staging).map_err(io_err(&staging))?;
        write_atomic(&staging.join(SCENE_COPY), req.scene.copy.as_bytes())?;
        write_atomic(&staging.join(META_PROVISIONAL), format!("{}\n", meta.encode()).as_bytes())?;
        for log in [FRAMES_LOG, ACTIONS_LOG, ANNOTATIONS_LOG, MEDIA_LOG] {
            let p = staging.join(log);
            File::create(&p).map_err(io_err(&p))?;
        }
        sync_dir(&staging);
        let dir = self.episode_dir(&episode_id);
        fs::rename(&staging, &dir).map_err(io_err(&dir))?;
        sync_dir(&episodes);

        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new().append(true).open(&p).map_err(io_err(&p))
        };
        let last_tick = Arc::new(AtomicU64::new(req.start_tick.saturating_sub(1)));
        self.shared.live.lock().unwrap().insert(episode_id.clone(), last_tick.clone());
        Ok(EpisodeWriter {
            frames: open(FRAMES_LOG)?,
            actions: open(ACTIONS_LOG)?,
            dir,
            meta,
            frames_buf: Vec::new(),
            actions_buf: Vec::new(),
            pending_frames: 0,
            frame_count: 0,
            action_count: 0,
            contributors: BTreeSet::new(),
            origins: BTreeSet::new(),
            last_tick,
            finalized: false,
            shared: self.shared.clone(),
            _release: release,
        })
    }

    /// Manifest of an episode: the final `meta` if present, otherwise one
    /// derived from the provisional manifest and the logs on disk.
    pub fn manifest(&self, id: &str) -> StoreResult<Manifest> {
        if !valid_id(id) {
            return Err(StoreError::UnknownEpisode(id.into()));
        }
        load_manifest(&self.episode_dir(id)).map_err(|e| match e {
            StoreError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => {
                StoreError::UnknownEpisode(id.into())
            }
            e => e,
        })
    }

    /// Inclusive tick range annotations of this episode may anchor to.
    pub fn episode_tick_range(&self, id: &str) -> StoreResult<(u64, Option<u64>)> {
        if let Some(last) = self.shared.live.lock().unwrap().get(id) {
            let p = read_provisional(&self.episode_dir(id))?;
            let last = last.load(Ordering::Acquire);
            return Ok((p.start_tick, (last >= p.start_tick).then_some(last)));
        }
        let m = self.manifest(id)?;
        Ok((m.start_tick, (m.frame_count > 0).then_some(m.end_tick)))
    }

    /// Closes every episode left without a final manifest by a crash: torn
    /// tails are cut, actions past the last frame dropped, and a manifest with
    /// `finalized: false, recovered: true` written. Returns the recovered ids.
    pub fn recover(&self) -> StoreResult<Vec<String>> {
        let episodes = self.episodes_dir();
        if let Ok(entries) = fs::read_dir(&episodes) {
            for e in entries.filter_map(|e| e.ok()) {
                let name = e.file_name();
                if name.to_string_lossy().starts_with(STAGING_PREFIX) {
                    let p = e.path();
                    fs::remove_dir_all(&p).map_err(io_err(&p))?;
                }
            }
        }
        media::clean_staging(self)?;
        let live = self.shared.live.lock().unwrap().keys().cloned().collect::<BTreeSet<_>>();
        let mut recovered = Vec::new();
        for id in self.episode_ids()? {
            let dir = self.episode_dir(&id);
            if dir.join(META).exists() || live.contains(&id) {
                continue;
            }
            let p = read_provisional(&dir)?;
            let frames = truncate_log(&dir.join(FRAMES_LOG), |_| true)?;
            let last = frames
                .iter()
                .filter_map(|l| demoforge_core::protocol::decode_frame(l).ok())
                .map(|f| f.tick)
                .next_back();
            let mut origins = BTreeSet::new();
            let actions = truncate_log(&dir.join(ACTIONS_LOG), |l| match ActionEvent::decode(l) {
                Ok(a) if last.is_some_and(|t| a.tick <= t) => {
                    origins.insert(a.origin);
                    true
                }
                _ => false,
            })?;
            truncate_log(&dir.join(ANNOTATIONS_LOG), |_| true)?;
            truncate_log(&dir.join(MEDIA_LOG), |_| true)?;
            let mut m = Manifest::from_provisional(&p, frames.len() as u64, actions.len() as u64);
            m.recovered = true;
            m.multi_writer = origins.len() > 1;
            write_atomic(&dir.join(META), format!("{}\n", m.encode()).as_bytes())?;
            recovered.push(id);
        }
        Ok(recovered)
    }
}

/// Keeps the longest prefix of complete lines accepted by `keep` and cuts the file there.
fn truncate_log(path: &Path, mut keep: impl FnMut(&str) -> bool) -> StoreResult<Vec<String>> {
    let log = read_log(path).map_err(io_err(path))?;
    let mut kept = Vec::new();
    let mut len = 0u64;
    for (_, bytes) in &log.lines {
        match std::str::from_utf8(bytes) {
            Ok(s) if keep(s) => {
                kept.push(s.to_string());
                len += bytes.len() as u64 + 1;
            }
            _ => break,
        }
    }
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    if f.metadata().map_err(io_err(path))?.len() != len {
        f.set_len(len).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(kept)
}

pub(crate) fn read_provisional(dir: &Path) -> StoreResult<ProvisionalMeta> {
    let p = dir.join(META_PROVISIONAL);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    ProvisionalMeta::decode(text.trim_end()).map_err(|source| StoreError::Codec { path: p, source })
}

pub(crate) fn read_manifest(dir: &Path) -> StoreResult<Option<Manifest>> {
    let p = dir.join(META);
    match fs::read_to_string(&p) {
        Ok(text) => Manifest::decode(text.trim_end()).map(Some).map_err(|source| StoreError::Codec { path: p, source }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&p)(e)),
    }
}

pub(crate) fn load_manifest(dir: &Path) -> StoreResult<Manifest> {
    if let Some(m) = read_manifest(dir)? {
        return Ok(m);
    }
    let p = read_provisional(dir)?;
    let count = |name: &str| -> StoreResult<u64> {
        let path = dir.join(name);
        Ok(read_log(&path).map_err(io_err(&path))?.lines.len() as u64)
    };
    Ok(Manifest::from_provisional(&p, count(FRAMES_LOG)?, count(ACTIONS_LOG)?))
}

/// Ids are used as path components, so only a conservative charset is accepted.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.')
}

/// UTC timestamp prefix plus 8 random hex digits.
pub fn new_episode_id() -> String {
    let now = chrono::Utc::now();
    format!("{}-{:08x}", now.format("%Y%m%dT%H%M%S%3fZ"), rand::random::<u32>())
}

struct SessionRelease {
    shared: Arc<Shared>,
    session_id: String,
}

impl Drop for SessionRelease {
    fn drop(&mut self) {
        self.shared.open_sessions.lock().unwrap().remove(&self.session_id);
    }
}

/// Append handle for one episode. Records are buffered and written at flush
/// boundaries (every [`FLUSH_EVERY`] frames and at finalize), actions before
/// frames, so the frames on disk never outrun their actions.
pub struct EpisodeWriter {
    dir: PathBuf,
    meta: ProvisionalMeta,
    frames: File,
    actions: File,
    frames_buf: Vec<u8>,
    actions_buf: Vec<u8>,
    pending_frames: u64,
    frame_count: u64,
    action_count: u64,
    contributors: BTreeSet<String>,
    origins: BTreeSet<String>,
    last_tick: Arc<AtomicU64>,
    finalized: bool,
    shared: Arc<Shared>,
    _release: SessionRelease,
}

impl EpisodeWriter {
    pub fn episode_id(&self) -> &str {
        &self.meta.episode_id
    }

    pub fn start_tick(&self) -> u64 {
        self.meta.start_tick
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    fn next_tick(&self) -> u64 {
        self.meta.start_tick + self.frame_count
    }

    pub fn add_contributor(&mut self, who: &str) {
        self.contributors.insert(who.to_string());
    }

    pub fn append_frame(&mut self, frame: &SimFrame) -> StoreResult<()> {
        if self.finalized {
            return Err(StoreError::Finalized);
        }
        let expected = self.next_tick();
        if frame.tick != expected {
            return Err(StoreError::TickDiscontinuity { expected, got: frame.tick });
        }
        if self.pending_frames >= FLUSH_EVERY {
            self.flush()?;
        }
        let line = encode_frame(frame).map_err(|source| StoreError::Codec { path: self.dir.join(FRAMES_LOG), source })?;
        self.frames_buf.extend_from_slice(line.as_bytes());
        self.frames_buf.push(b'\n');
        self.frame_count += 1;
        self.pending_frames += 1;
        self.last_tick.store(frame.tick, Ordering::Release);
        Ok(())
    }

    /// Appends an action applied before the step that produced frame `ev.tick`;
    /// that frame must already be appended.
    pub fn append_action(&mut self, ev: &ActionEvent, contributor: &str) -> StoreResult<()> {
        if self.finalized {
            return Err(StoreError::Finalized);
        }
        let lo = self.meta.start_tick;
        let hi = self.next_tick() as i128 - 1;
        if ev.tick < lo || ev.tick as i128 > hi {
            return Err(StoreError::ActionOutOfRange { tick: ev.tick, lo, hi });
        }
        let line = ev.encode().map_err(|source| StoreError::Codec { path: self.dir.join(ACTIONS_LOG), source })?;
        self.actions_buf.extend_from_slice(line.as_bytes());
        self.actions_buf.push(b'\n');
        self.action_count += 1;
        self.origins.insert(ev.origin.clone());
        self.contributors.insert(contributor.to_string());
        Ok(())
    }

    pub fn flush(&mut self) -> StoreResult<()> {
        let write = |f: &mut File, buf: &mut Vec<u8>, name: &str| -> StoreResult<()> {
            if buf.is_empty() {
                return Ok(());
            }
            let path = self.dir.join(name);
            f.write_all(buf).map_err(io_err(&path))?;
            f.sync_data().map_err(io_err(&path))?;
            buf.clear();
            Ok(())
        };
        write(&mut self.actions, &mut self.actions_buf, ACTIONS_LOG)?;
        write(&mut self.frames, &mut self.frames_buf, FRAMES_LOG)?;
        self.pending_frames = 0;
        Ok(())
    }

    /// Flushes and writes the final manifest atomically. The writer accepts no records afterwards.
    pub fn finalize(&mut self) -> StoreResult<Manifest> {
        if self.finalized {
            return Err(StoreError::Finalized);
        }
        self.flush()?;
        let mut m = Manifest::from_provisional(&self.meta, self.frame_count, self.action_count);
        m.contributors = self.contributors.iter().cloned().collect();
        m.multi_writer = self.origins.len() > 1;
        m.finalized = true;
        write_atomic(&self.dir.join(META), format!("{}\n", m.encode()).as_bytes())?;
        self.finalized = true;
        self.shared.live.lock().unwrap().remove(&self.meta.episode_id);
        Ok(m)
    }
}

impl Drop for EpisodeWriter {
    fn drop(&mut self) {
        if !self.finalized {
            // Unfinalized writers leave a recoverable prefix on disk.
            let _ = self.flush();
            self.shared.live.lock().unwrap().remove(&self.meta.episode_id);
        }
    }
}
