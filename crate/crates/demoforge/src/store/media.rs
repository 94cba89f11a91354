//! Content-addressed media: blobs are stored once under their SHA-256 and
//! described by one record; targets reference them from their `media.log`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use demoforge_core::codec::{self, CodecError, Fields, ObjectBuilder};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{append_line, io_err, read_log, write_atomic, Store, StoreError, StoreResult, MEDIA_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaSource {
    Upload,
    SimCapture,
}

impl MediaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaSource::Upload => "upload",
            MediaSource::SimCapture => "sim_capture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "upload" => Some(MediaSource::Upload),
            "sim_capture" => Some(MediaSource::SimCapture),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MediaMetadata {
    pub scene: String,
    pub embodiment: String,
    pub task: String,
    pub contributor: String,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediaRecord {
    pub media_id: String,
    /// Episode or session the bytes were first uploaded to.
    pub target: String,
    pub source: MediaSource,
    pub content_digest: String,
    pub byte_length: u64,
    pub declared_mime: String,
    pub metadata: MediaMetadata,
    pub created_at: i64,
}

impl MediaRecord {
    pub fn to_object(&self) -> serde_json::Map<String, Value> {
        let m = &self.metadata;
        let meta = ObjectBuilder::new()
            .set("contributor", m.contributor.as_str())
            .set("duration_s", m.duration_s.map_or(Value::Null, Value::from))
            .set("embodiment", m.embodiment.as_str())
            .set("scene", m.scene.as_str())
            .set("task", m.task.as_str())
            .build();
        ObjectBuilder::new()
            .set("byte_length", self.byte_length)
            .set("content_digest", self.content_digest.as_str())
            .set("created_at", self.created_at)
            .set("declared_mime", self.declared_mime.as_str())
            .set("media_id", self.media_id.as_str())
            .set("metadata", Value::Object(meta))
            .set("source", self.source.as_str())
            .set("target", self.target.as_str())
            .build()
    }

    pub fn encode(&self) -> String {
        codec::to_canonical(self.to_object())
    }

    pub fn decode(text: &str) -> Result<Self, CodecError> {
        let mut f = Fields::new(codec::parse_object(text)?, "media");
        let mut m = f.object("metadata")?;
        let metadata = MediaMetadata {
            contributor: m.string("contributor")?,
            duration_s: m.opt_f64("duration_s")?,
            embodiment: m.string("embodiment")?,
            scene: m.string("scene")?,
            task: m.string("task")?,
        };
        m.finish()?;
        let source = f.string("source")?;
        let r = MediaRecord {
            byte_length: f.u64("byte_length")?,
            content_digest: f.string("content_digest")?,
            created_at: f.take("created_at")?.as_i64().ok_or_else(|| CodecError::schema("created_at: expected integer"))?,
            declared_mime: f.string("declared_mime")?,
            media_id: f.string("media_id")?,
            source: MediaSource::parse(&source).ok_or_else(|| CodecError::schema(format!("source: unknown `{source}`")))?,
            target: f.string("target")?,
            metadata,
        };
        f.finish()?;
        Ok(r)
    }
}

/// `m-` plus the first 16 hex digits of the content digest.
pub fn media_id_for(digest: &str) -> String {
    format!("m-{}", &digest[..16])
}

fn blobs(store: &Store) -> PathBuf {
    store.media_dir().join("blobs")
}

fn records(store: &Store) -> PathBuf {
    store.media_dir().join("records")
}

fn staging(store: &Store) -> PathBuf {
    store.media_dir().join("staging")
}

pub(super) fn clean_staging(store: &Store) -> StoreResult<()> {
    let dir = staging(store);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    Ok(())
}

/// Streams an upload to a staging file while hashing it. Dropping the sink
/// without [`MediaSink::commit`] removes the staging file.
pub struct MediaSink {
    store: Store,
    path: PathBuf,
    file: Option<File>,
    hasher: Sha256,
    len: u64,
    cap: u64,
}

impl MediaSink {
    pub fn write(&mut self, chunk: &[u8]) -> StoreResult<()> {
        self.len += chunk.len() as u64;
        if self.len > self.cap {
            return Err(StoreError::TooLarge { cap: self.cap });
        }
        self.hasher.update(chunk);
        let f = self.file.as_mut().expect("sink not committed");
        f.write_all(chunk).map_err(io_err(&self.path))
    }

    /// Stores the blob (unless already present) and its record, and links it
    /// to `target_dir`. Returns the record and whether it was newly created.
    pub fn commit(
        mut self,
        declared_digest: Option<&str>,
        target: &str,
        target_dir: &Path,
        source: MediaSource,
        declared_mime: &str,
        metadata: MediaMetadata,
    ) -> StoreResult<(MediaRecord, bool)> {
        if self.len == 0 {
            return Err(StoreError::Invalid("empty upload".into()));
        }
        let digest = hex::encode(std::mem::take(&mut self.hasher).finalize());
        if let Some(d) = declared_digest {
            if !d.eq_ignore_ascii_case(&digest) {
                return Err(StoreError::DigestMismatch { declared: d.to_string(), actual: digest });
            }
        }
        let f = self.file.take().expect("sink not committed");
        f.sync_all().map_err(io_err(&self.path))?;
        drop(f);

        let store = self.store.clone();
        let _guard = store.shared.ingest.lock().unwrap();
        let record_path = records(&store).join(&digest);
        let (record, created) = match fs::read_to_string(&record_path) {
            Ok(text) => {
                let rec = MediaRecord::decode(text.trim_end())
                    .map_err(|source| StoreError::Codec { path: record_path.clone(), source })?;
                (rec, false)
            }
            Err(_) => {
                let blob = blobs(&store).join(&digest);
                fs::create_dir_all(blobs(&store)).map_err(io_err(&blob))?;
                fs::create_dir_all(records(&store)).map_err(io_err(&record_path))?;
                fs::rename(&self.path, &blob).map_err(io_err(&blob))?;
                let rec = MediaRecord {
                    media_id: media_id_for(&digest),
                    target: target.to_string(),
                    source,
                    content_digest: digest.clone(),
                    byte_length: self.len,
                    declared_mime: declared_mime.to_string(),
                    metadata,
                    created_at: crate::now_ms(),
                };
                write_atomic(&record_path, format!("{}\n", rec.encode()).as_bytes())?;
                (rec, true)
            }
        };
        fs::create_dir_all(target_dir).map_err(io_err(target_dir))?;
        let log = target_dir.join(MEDIA_LOG);
        if !linked_media(&log)?.iter().any(|(_, d)| d == &record.content_digest) {
            let line = ObjectBuilder::new()
                .set("content_digest", record.content_digest.as_str())
                .set("media_id", record.media_id.as_str())
                .encode();
            append_line(&log, &line)?;
        }
        Ok((record, created))
    }
}

impl Drop for MediaSink {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// (media_id, digest) pairs listed in a target's media log.
pub(crate) fn linked_media(log: &Path) -> StoreResult<Vec<(String, String)>> {
    let lines = read_log(log).map_err(io_err(log))?;
    Ok(lines
        .lines
        .iter()
        .filter_map(|(_, b)| {
            let mut f = Fields::new(codec::parse_object(std::str::from_utf8(b).ok()?).ok()?, "media link");
            Some((f.string("media_id").ok()?, f.string("content_digest").ok()?))
        })
        .collect())
}

impl Store {
    pub fn media_sink(&self, cap: u64) -> StoreResult<MediaSink> {
        let dir = staging(self);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{:016x}", rand::random::<u64>()));
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(MediaSink { store: self.clone(), path, file: Some(file), hasher: Sha256::new(), len: 0, cap })
    }

    pub fn media_record(&self, digest: &str) -> StoreResult<Option<MediaRecord>> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let p = records(self).join(digest);
        match fs::read_to_string(&p) {
            Ok(text) => MediaRecord::decode(text.trim_end())
                .map(Some)
                .map_err(|source| StoreError::Codec { path: p, source }),
            Err(_) => Ok(None),
        }
    }

    pub fn blob_path(&self, digest: &str) -> PathBuf {
        blobs(self).join(digest)
    }

    /// Media records linked to a target directory, in link order.
    pub fn media_for(&self, target_dir: &Path) -> StoreResult<Vec<MediaRecord>> {
        linked_media(&target_dir.join(MEDIA_LOG))?
            .into_iter()
            .filter_map(|(_, d)| self.media_record(&d).transpose())
            .collect()
    }
}
