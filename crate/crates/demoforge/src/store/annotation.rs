use demoforge_core::codec::{self, CodecError, Fields, ObjectBuilder};
use serde_json::Value;

use super::{append_line, StoreResult, Store, StoreError, ANNOTATIONS_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationKind {
    TaskDescription,
    Procedure,
    Constraint,
    Rationale,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 4] =
        [AnnotationKind::TaskDescription, AnnotationKind::Procedure, AnnotationKind::Constraint, AnnotationKind::Rationale];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationKind::TaskDescription => "task_description",
            AnnotationKind::Procedure => "procedure",
            AnnotationKind::Constraint => "constraint",
            AnnotationKind::Rationale => "rationale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub annotation_id: String,
    /// Episode or session id.
    pub target: String,
    pub author: String,
    pub text: String,
    pub kind: AnnotationKind,
    pub created_at: i64,
    /// Inclusive tick range.
    pub anchor: Option<(u64, u64)>,
}

impl AnnotationRecord {
    pub fn encode(&self) -> String {
        let anchor = self.anchor.map_or(Value::Null, |(a, b)| Value::from(vec![a, b]));
        ObjectBuilder::new()
            .set("anchor", anchor)
            .set("annotation_id", self.annotation_id.as_str())
            .set("author", self.author.as_str())
            .set("created_at", self.created_at)
            .set("kind", self.kind.as_str())
            .set("target", self.target.as_str())
            .set("text", self.text.as_str())
            .encode()
    }

    pub fn decode(text: &str) -> Result<Self, CodecError> {
        let mut f = Fields::new(codec::parse_object(text)?, "annotation");
        let anchor = match f.take_opt("anchor") {
            None => None,
            Some(v) => Some(parse_anchor(&v)?),
        };
        let kind = f.string("kind")?;
        let rec = AnnotationRecord {
            annotation_id: f.string("annotation_id")?,
            author: f.string("author")?,
            created_at: f.take("created_at")?.as_i64().ok_or_else(|| CodecError::schema("created_at: expected integer"))?,
            kind: AnnotationKind::parse(&kind).ok_or_else(|| CodecError::schema(format!("kind: unknown `{kind}`")))?,
            target: f.string("target")?,
            text: f.string("text")?,
            anchor,
        };
        f.finish()?;
        Ok(rec)
    }
}

pub fn parse_anchor(v: &Value) -> Result<(u64, u64), CodecError> {
    match v.as_array().map(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<_>>>()) {
        Some(Some(a)) if a.len() == 2 => Ok((a[0], a[1])),
        _ => Err(CodecError::schema("anchor: expected [t0, t1] of non-negative integers")),
    }
}

/// Checks a new annotation against its target's tick range `[lo, hi]`
/// (`hi = None` when nothing has been recorded yet).
pub fn check_annotation(text: &str, anchor: Option<(u64, u64)>, range: (u64, Option<u64>)) -> Result<(), String> {
    if text.trim().is_empty() {
        return Err("annotation text is empty".into());
    }
    if let Some((t0, t1)) = anchor {
        if t0 > t1 {
            return Err(format!("anchor [{t0}, {t1}] has t0 > t1"));
        }
        let (lo, hi) = range;
        match hi {
            Some(hi) if t0 >= lo && t1 <= hi => {}
            Some(hi) => return Err(format!("anchor [{t0}, {t1}] outside tick range [{lo}, {hi}]")),
            None => return Err(format!("anchor [{t0}, {t1}] outside empty tick range")),
        }
    }
    Ok(())
}

impl Store {
    /// Appends to the target episode's (or session's) annotation log.
    pub fn append_annotation(&self, rec: &AnnotationRecord, is_episode: bool) -> StoreResult<()> {
        let _guard = self.shared.ingest.lock().unwrap();
        let dir = if is_episode {
            if !self.has_episode(&rec.target) {
                return Err(StoreError::UnknownEpisode(rec.target.clone()));
            }
            self.episode_dir(&rec.target)
        } else {
            let d = self.session_dir(&rec.target);
            std::fs::create_dir_all(&d).map_err(super::io_err(&d))?;
            d
        };
        append_line(&dir.join(ANNOTATIONS_LOG), &rec.encode())
    }

    pub fn annotations(&self, target_dir: &std::path::Path) -> StoreResult<Vec<AnnotationRecord>> {
        let path = target_dir.join(ANNOTATIONS_LOG);
        let log = super::read_log(&path).map_err(super::io_err(&path))?;
        Ok(log
            .lines
            .iter()
            .filter_map(|(_, b)| std::str::from_utf8(b).ok().and_then(|s| AnnotationRecord::decode(s).ok()))
            .collect())
    }
}

pub fn new_annotation_id() -> String {
    format!("a-{}-{:08x}", crate::now_ms(), rand::random::<u32>())
}
