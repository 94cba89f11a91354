use std::fmt;
use std::fs;
use std::path::Path;

use demoforge_core::protocol::decode_frame;
use demoforge_core::{ActionEvent, SimFrame, TickRate};
use sha2::{Digest, Sha256};

use super::annotation::AnnotationRecord;
use super::media::linked_media;
use super::{
    line_text, read_log, read_manifest, read_provisional, LogLines, Store, ACTIONS_LOG, ANNOTATIONS_LOG,
    FRAMES_LOG, MEDIA_LOG, SCENE_COPY,
};
use crate::sha256_hex;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
    /// Each prefixed with a `file[:line]` locator.
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", if self.ok() { "ok" } else { "FAILED" })?;
        for w in &self.warnings {
            writeln!(f, "  warning: {w}")?;
        }
        for e in &self.errors {
            writeln!(f, "  error: {e}")?;
        }
        Ok(())
    }
}

struct Checker {
    report: ValidationReport,
    finalized: bool,
}

impl Checker {
    fn error(&mut self, e: String) {
        self.report.errors.push(e);
    }

    fn warn(&mut self, w: String) {
        self.report.warnings.push(w);
    }

    /// Problems an interrupted recording can legitimately leave behind.
    fn truncation(&mut self, msg: String) {
        if self.finalized {
            self.error(msg);
        } else {
            self.warn(msg);
        }
    }

    fn log(&mut self, dir: &Path, name: &str) -> Option<LogLines> {
        match read_log(&dir.join(name)) {
            Ok(l) => {
                if let Some(n) = l.torn {
                    self.truncation(format!("{name}:{n}: torn record"));
                }
                Some(l)
            }
            Err(e) => {
                self.error(format!("{name}: {e}"));
                None
            }
        }
    }
}

/// Read-only consistency check of one episode directory.
pub fn validate_episode(dir: &Path) -> ValidationReport {
    let mut c = Checker { report: ValidationReport::default(), finalized: false };
    let p = match read_provisional(dir) {
        Ok(p) => p,
        Err(e) => {
            c.error(format!("{e}"));
            return c.report;
        }
    };
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            c.error(format!("{e}"));
            None
        }
    };
    c.finalized = manifest.as_ref().is_some_and(|m| m.finalized);
    if !c.finalized {
        c.warn("not finalized".into());
    }
    if let Some(m) = &manifest {
        for (field, ok) in [
            ("episode_id", m.episode_id == p.episode_id),
            ("session_id", m.session_id == p.session_id),
            ("scene", m.scene == p.scene),
            ("robot", m.robot == p.robot),
            ("scene_digest", m.scene_digest == p.scene_digest),
            ("label", m.label == p.label),
            ("start_tick", m.start_tick == p.start_tick),
            ("tick_hz", m.tick_hz == p.tick_hz),
        ] {
            if !ok {
                c.error(format!("meta: {field} differs from meta.provisional"));
            }
        }
    }

    match fs::read(dir.join(SCENE_COPY)) {
        Ok(bytes) => {
            if sha256_hex(&bytes) != p.scene_digest {
                c.error(format!("{SCENE_COPY}: digest does not match manifest scene_digest"));
            } else if let Err(e) = std::str::from_utf8(&bytes).map_err(|e| e.to_string()).and_then(|s| {
                crate::catalog::scene_from_copy(s).map_err(|e| e.to_string())
            }) {
                c.error(format!("{SCENE_COPY}: {e}"));
            }
        }
        Err(e) => c.error(format!("{SCENE_COPY}: {e}")),
    }

    let rate = TickRate::new(p.tick_hz);
    let frames = check_frames(&mut c, dir, p.start_tick, rate);
    let last_tick = frames.last().map(|f| f.tick);
    let action_count = check_actions(&mut c, dir, p.start_tick, last_tick);

    if let Some(m) = manifest.as_ref().filter(|m| m.finalized || m.recovered) {
        let n = frames.len() as u64;
        if m.frame_count != n {
            c.error(format!("meta: frame_count {} but {FRAMES_LOG} has {n} frames", m.frame_count));
        }
        if m.action_count != action_count {
            c.error(format!("meta: action_count {} but {ACTIONS_LOG} has {action_count} actions", m.action_count));
        }
        if m.end_tick != (m.start_tick + m.frame_count).saturating_sub(1) {
            c.error(format!("meta: end_tick {} inconsistent with start_tick and frame_count", m.end_tick));
        }
    }
    check_annotations(&mut c, dir, &p.episode_id, p.start_tick, last_tick);
    check_media(&mut c, dir);
    c.report
}

fn check_frames(c: &mut Checker, dir: &Path, start: u64, rate: TickRate) -> Vec<SimFrame> {
    let Some(log) = c.log(dir, FRAMES_LOG) else { return Vec::new() };
    let mut frames: Vec<SimFrame> = Vec::with_capacity(log.lines.len());
    for (n, bytes) in &log.lines {
        let f = match line_text(bytes).and_then(decode_frame) {
            Ok(f) => f,
            Err(e) => {
                c.error(format!("{FRAMES_LOG}:{n}: {e}"));
                continue;
            }
        };
        let expected = frames.last().map_or(start, |p| p.tick + 1);
        if f.tick != expected {
            c.error(format!("{FRAMES_LOG}:{n}: tick {} where {expected} expected", f.tick));
        }
        if let Some(prev) = frames.last() {
            if f.seq <= prev.seq {
                c.error(format!("{FRAMES_LOG}:{n}: seq {} not above {}", f.seq, prev.seq));
            }
        }
        if f.sim_time.to_bits() != rate.time_of(f.tick).to_bits() {
            c.error(format!("{FRAMES_LOG}:{n}: time {} is not tick/{}", f.sim_time, rate.hz()));
        }
        frames.push(f);
    }
    frames
}

fn check_actions(c: &mut Checker, dir: &Path, start: u64, last_tick: Option<u64>) -> u64 {
    let Some(log) = c.log(dir, ACTIONS_LOG) else { return 0 };
    let mut prev: Option<u64> = None;
    for (n, bytes) in &log.lines {
        let a = match line_text(bytes).and_then(ActionEvent::decode) {
            Ok(a) => a,
            Err(e) => {
                c.error(format!("{ACTIONS_LOG}:{n}: {e}"));
                continue;
            }
        };
        if prev.is_some_and(|p| a.tick < p) {
            c.error(format!("{ACTIONS_LOG}:{n}: tick {} goes backwards", a.tick));
        }
        prev = Some(a.tick);
        if a.tick < start {
            c.error(format!("{ACTIONS_LOG}:{n}: tick {} before start tick {start}", a.tick));
        } else if last_tick.is_none_or(|t| a.tick > t) {
            c.truncation(format!("{ACTIONS_LOG}:{n}: tick {} has no recorded frame", a.tick));
        }
    }
    log.lines.len() as u64
}

fn check_annotations(c: &mut Checker, dir: &Path, episode_id: &str, start: u64, last_tick: Option<u64>) {
    let Some(log) = c.log(dir, ANNOTATIONS_LOG) else { return };
    for (n, bytes) in &log.lines {
        let a = match line_text(bytes).and_then(AnnotationRecord::decode) {
            Ok(a) => a,
            Err(e) => {
                c.error(format!("{ANNOTATIONS_LOG}:{n}: {e}"));
                continue;
            }
        };
        if a.target != episode_id {
            c.error(format!("{ANNOTATIONS_LOG}:{n}: target `{}` is not this episode", a.target));
        }
        if a.text.trim().is_empty() {
            c.error(format!("{ANNOTATIONS_LOG}:{n}: empty text"));
        }
        if let Some((t0, t1)) = a.anchor {
            if t0 > t1 || t0 < start {
                c.error(format!("{ANNOTATIONS_LOG}:{n}: anchor [{t0}, {t1}] invalid"));
            } else if last_tick.is_none_or(|t| t1 > t) {
                c.truncation(format!("{ANNOTATIONS_LOG}:{n}: anchor [{t0}, {t1}] beyond last recorded tick"));
            }
        }
    }
}

fn check_media(c: &mut Checker, dir: &Path) {
    if c.log(dir, MEDIA_LOG).is_none() {
        return;
    }
    let links = match linked_media(&dir.join(MEDIA_LOG)) {
        Ok(l) => l,
        Err(e) => return c.error(format!("{MEDIA_LOG}: {e}")),
    };
    let Some(root) = dir.parent().and_then(Path::parent) else { return };
    let store = Store::new(root);
    for (i, (id, digest)) in links.iter().enumerate() {
        let n = i + 1;
        let rec = match store.media_record(digest) {
            Ok(Some(r)) => r,
            Ok(None) => {
                c.error(format!("{MEDIA_LOG}:{n}: no record for {id}"));
                continue;
            }
            Err(e) => {
                c.error(format!("{MEDIA_LOG}:{n}: {e}"));
                continue;
            }
        };
        if &rec.media_id != id {
            c.error(format!("{MEDIA_LOG}:{n}: media id {id} does not match record {}", rec.media_id));
        }
        match fs::read(store.blob_path(digest)) {
            Ok(bytes) => {
                if hex::encode(Sha256::digest(&bytes)) != *digest || bytes.len() as u64 != rec.byte_length {
                    c.error(format!("{MEDIA_LOG}:{n}: blob for {id} does not match its digest"));
                }
            }
            Err(e) => c.error(format!("{MEDIA_LOG}:{n}: blob for {id}: {e}")),
        }
    }
}
