use std::collections::HashMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use demoforge_core::codec::{self, Fields, ObjectBuilder};
use futures::StreamExt;
use serde_json::{Map, Value};
use tokio_util::io::ReaderStream;

use super::session::{self, RecordingError};
use super::{stream_rate_hz, AppState};
use crate::catalog::{robot_summary, scene_summary};
use crate::store::{
    check_annotation, new_annotation_id, valid_id, AnnotationKind, AnnotationRecord, MediaMetadata, MediaSource,
    StoreError, FRAMES_LOG,
};

type App = State<Arc<AppState>>;

fn json(status: StatusCode, body: Map<String, Value>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], codec::to_canonical(body)).into_response()
}

fn ok(body: Map<String, Value>) -> Response {
    json(StatusCode::OK, body)
}

fn error(status: StatusCode, code: &str, detail: impl std::fmt::Display) -> Response {
    json(status, ObjectBuilder::new().set("detail", detail.to_string()).set("error", code).build())
}

fn not_found(what: &str, id: &str) -> Response {
    error(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
}

fn bad_request(detail: impl std::fmt::Display) -> Response {
    error(StatusCode::BAD_REQUEST, "bad_request", detail)
}

fn internal(e: impl std::fmt::Display) -> Response {
    tracing::error!("{e}");
    error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e)
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::UnknownEpisode(id) => not_found("episode", &id),
        StoreError::TooLarge { .. } => error(StatusCode::PAYLOAD_TOO_LARGE, "too_large", e),
        StoreError::DigestMismatch { .. } => error(StatusCode::UNPROCESSABLE_ENTITY, "digest_mismatch", e),
        StoreError::Invalid(_) => bad_request(e),
        e => internal(e),
    }
}

fn list(key: &str, items: Vec<Value>) -> Map<String, Value> {
    ObjectBuilder::new().set(key, items).build()
}

/// Strict JSON object body; an empty body reads as `{}`.
fn body_fields(body: &Bytes, context: &'static str) -> Result<Fields, Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Fields::new(Map::new(), context));
    }
    let text = std::str::from_utf8(body).map_err(|_| bad_request("body is not UTF-8"))?;
    codec::parse_object(text).map(|m| Fields::new(m, context)).map_err(bad_request)
}

fn contributor(headers: &HeaderMap) -> String {
    headers
        .get("x-contributor")
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or("anonymous")
        .to_string()
}

pub async fn scenes(State(app): App) -> Response {
    ok(list("scenes", app.catalog.scenes().map(|s| Value::Object(scene_summary(s))).collect()))
}

pub async fn robots(State(app): App) -> Response {
    ok(list("robots", app.catalog.robots().map(|r| Value::Object(robot_summary(r))).collect()))
}

fn session_object(s: &session::SessionHandle) -> Map<String, Value> {
    ObjectBuilder::new()
        .set("clients", s.clients())
        .set("dt", s.rate.dt())
        .set("live", s.live())
        .set("recording", s.recording().map_or(Value::Null, Value::from))
        .set("robot", s.robot.as_str())
        .set("scene", s.scene.as_str())
        .set("scene_digest", s.scene_digest.as_str())
        .set("session_id", s.id.as_str())
        .set("stream_rate_hz", stream_rate_hz(s.rate.hz()))
        .set("tick", s.tick())
        .set("ws", format!("/ws/v1/sessions/{}", s.id))
        .build()
}

pub async fn list_sessions(State(app): App) -> Response {
    ok(list("sessions", app.sessions().iter().map(|s| Value::Object(session_object(s))).collect()))
}

pub async fn create_session(State(app): App, body: Bytes) -> Response {
    let mut f = match body_fields(&body, "session request") {
        Ok(f) => f,
        Err(r) => return r,
    };
    let parsed = (|| {
        let scene = f.string("scene")?;
        let robot = f.take_opt("robot").map(|v| v.as_str().map(str::to_string));
        f.finish()?;
        Ok::<_, codec::CodecError>((scene, robot))
    })();
    let (scene, robot) = match parsed {
        Ok((s, Some(None))) => return bad_request(format!("robot: expected string (scene `{s}`)")),
        Ok((s, r)) => (s, r.flatten()),
        Err(e) => return bad_request(e),
    };
    let Some(entry) = app.catalog.scene(&scene) else { return not_found("scene", &scene) };
    if let Some(r) = robot.filter(|r| *r != entry.spec.robot) {
        return bad_request(format!("scene `{scene}` uses robot `{}`, not `{r}`", entry.spec.robot));
    }
    let handle = {
        let mut sessions = app.sessions.lock().unwrap();
        if sessions.len() >= app.max_sessions {
            return error(StatusCode::SERVICE_UNAVAILABLE, "capacity", format!("{} sessions open", sessions.len()));
        }
        let id = loop {
            let id = format!("s-{:012x}", rand::random::<u64>() & 0xffff_ffff_ffff);
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        match session::spawn(id.clone(), entry, app.store.clone()) {
            Ok(h) => {
                sessions.insert(id, h.clone());
                h
            }
            Err(e) => return internal(e),
        }
    };
    tracing::info!(session = %handle.id, scene = %scene, "session created");
    json(StatusCode::CREATED, session_object(&handle))
}

fn recording_error(e: RecordingError) -> Response {
    match e {
        RecordingError::AlreadyRecording | RecordingError::NotRecording => error(StatusCode::CONFLICT, "conflict", e),
        RecordingError::Closed => error(StatusCode::GONE, "session_closed", e),
        RecordingError::Store(e) => store_error(e),
    }
}

pub async fn recording_start(State(app): App, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(s) = app.session(&id) else { return not_found("session", &id) };
    let label = match body_fields(&body, "recording request").and_then(|mut f| {
        let label = f.take_opt("label").map(|v| v.as_str().map(str::to_string));
        f.finish().map_err(bad_request)?;
        match label {
            None => Ok(String::new()),
            Some(Some(l)) => Ok(l),
            Some(None) => Err(bad_request("label: expected string")),
        }
    }) {
        Ok(l) => l,
        Err(r) => return r,
    };
    match s.start_recording(label, contributor(&headers)).await {
        Ok((episode_id, tick)) => ok(ObjectBuilder::new().set("episode_id", episode_id).set("start_tick", tick).build()),
        Err(e) => recording_error(e),
    }
}

pub async fn recording_stop(State(app): App, Path(id): Path<String>) -> Response {
    let Some(s) = app.session(&id) else { return not_found("session", &id) };
    match s.stop_recording().await {
        Ok(m) => ok(ObjectBuilder::new().set("manifest", Value::Object(m.to_object())).build()),
        Err(e) => recording_error(e),
    }
}

pub async fn list_episodes(State(app): App, Query(q): Query<HashMap<String, String>>) -> Response {
    let ids = match app.store.episode_ids() {
        Ok(ids) => ids,
        Err(e) => return store_error(e),
    };
    let mut out = Vec::new();
    for id in ids {
        let Ok(m) = app.store.manifest(&id) else { continue };
        let keep = q.get("scene").is_none_or(|s| *s == m.scene) && q.get("label").is_none_or(|l| *l == m.label);
        if keep {
            out.push(Value::Object(m.to_object()));
        }
    }
    ok(list("episodes", out))
}

pub async fn episode(State(app): App, Path(id): Path<String>) -> Response {
    let m = match app.store.manifest(&id) {
        Ok(m) => m,
        Err(e) => return store_error(e),
    };
    let dir = app.store.episode_dir(&id);
    let annotations = match app.store.annotations(&dir) {
        Ok(a) => a,
        Err(e) => return store_error(e),
    };
    let media = match app.store.media_for(&dir) {
        Ok(m) => m,
        Err(e) => return store_error(e),
    };
    let annotations: Vec<Value> = annotations
        .iter()
        .filter_map(|a| codec::parse_object(&a.encode()).ok().map(Value::Object))
        .collect();
    let media: Vec<Value> = media.iter().map(|m| Value::Object(m.to_object())).collect();
    ok(ObjectBuilder::new()
        .set("annotations", annotations)
        .set("manifest", Value::Object(m.to_object()))
        .set("media", media)
        .build())
}

pub async fn episode_frames(State(app): App, Path(id): Path<String>) -> Response {
    if !app.store.has_episode(&id) {
        return not_found("episode", &id);
    }
    match tokio::fs::File::open(app.store.episode_dir(&id).join(FRAMES_LOG)).await {
        Ok(f) => (
            StatusCode::OK,
            [(header::CONTENT_TYPE, "application/x-ndjson")],
            Body::from_stream(ReaderStream::new(f)),
        )
            .into_response(),
        Err(e) => internal(e),
    }
}

enum Target {
    Episode,
    Session(Arc<session::SessionHandle>),
}

fn resolve_target(app: &AppState, target: &str) -> Result<Target, Response> {
    if let Some(s) = app.session(target) {
        return Ok(Target::Session(s));
    }
    if app.store.has_episode(target) {
        return Ok(Target::Episode);
    }
    Err(not_found("target", target))
}

pub async fn annotate(State(app): App, headers: HeaderMap, body: Bytes) -> Response {
    let mut f = match body_fields(&body, "annotation") {
        Ok(f) => f,
        Err(r) => return r,
    };
    let parsed = (|| {
        let target = f.string("target")?;
        let kind = f.string("kind")?;
        let text = f.string("text")?;
        let anchor = match f.take_opt("anchor") {
            None => None,
            Some(v) => Some(crate::store::parse_anchor(&v)?),
        };
        f.finish()?;
        Ok::<_, codec::CodecError>((target, kind, text, anchor))
    })();
    let (target, kind, text, anchor) = match parsed {
        Ok(p) => p,
        Err(e) => return bad_request(e),
    };
    let Some(kind) = AnnotationKind::parse(&kind) else {
        return bad_request(format!("kind: unknown `{kind}`"));
    };
    let t = match resolve_target(&app, &target) {
        Ok(t) => t,
        Err(r) => return r,
    };
    let range = match &t {
        Target::Session(s) => (0, (s.tick() > 0).then(|| s.tick())),
        Target::Episode => match app.store.episode_tick_range(&target) {
            Ok(r) => r,
            Err(e) => return store_error(e),
        },
    };
    if let Err(e) = check_annotation(&text, anchor, range) {
        return bad_request(e);
    }
    let rec = AnnotationRecord {
        annotation_id: new_annotation_id(),
        target,
        author: contributor(&headers),
        text,
        kind,
        created_at: crate::now_ms(),
        anchor,
    };
    if let Err(e) = app.store.append_annotation(&rec, matches!(t, Target::Episode)) {
        return store_error(e);
    }
    match codec::parse_object(&rec.encode()) {
        Ok(obj) => json(StatusCode::CREATED, obj),
        Err(e) => internal(e),
    }
}

pub async fn upload_media(
    State(app): App,
    Path(target): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    if !valid_id(&target) {
        return not_found("target", &target);
    }
    let t = match resolve_target(&app, &target) {
        Ok(t) => t,
        Err(r) => return r,
    };
    let cap = app.media_cap_bytes;
    let declared_len = headers.get(header::CONTENT_LENGTH).and_then(|v| v.to_str().ok()?.parse::<u64>().ok());
    if declared_len.is_some_and(|n| n > cap) {
        return store_error(StoreError::TooLarge { cap });
    }
    let source = match q.get("source").map(String::as_str) {
        None => MediaSource::Upload,
        Some(s) => match MediaSource::parse(s) {
            Some(s) => s,
            None => return bad_request(format!("source: unknown `{s}`")),
        },
    };
    let duration_s = match q.get("duration_s").map(|d| d.parse::<f64>()) {
        None => None,
        Some(Ok(d)) if d.is_finite() && d >= 0.0 => Some(d),
        Some(_) => return bad_request("duration_s: expected a non-negative number"),
    };
    let (scene_default, robot_default) = match &t {
        Target::Session(s) => (s.scene.clone(), s.robot.clone()),
        Target::Episode => match app.store.manifest(&target) {
            Ok(m) => (m.scene, m.robot),
            Err(e) => return store_error(e),
        },
    };
    let metadata = MediaMetadata {
        scene: q.get("scene").cloned().unwrap_or(scene_default),
        embodiment: q.get("embodiment").cloned().unwrap_or(robot_default),
        task: q.get("task").cloned().unwrap_or_default(),
        contributor: contributor(&headers),
        duration_s,
    };
    let mime = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/octet-stream")
        .to_string();
    let declared = headers.get("x-declared-digest").and_then(|v| v.to_str().ok()).map(str::to_string);

    let mut sink = match app.store.media_sink(cap) {
        Ok(s) => s,
        Err(e) => return store_error(e),
    };
    let mut stream = body.into_data_stream();
    while let Some(chunk) = stream.next().await {
        match chunk {
            Ok(c) => {
                if let Err(e) = sink.write(&c) {
                    return store_error(e);
                }
            }
            Err(e) => return bad_request(format!("upload interrupted: {e}")),
        }
    }
    let target_dir = match &t {
        Target::Episode => app.store.episode_dir(&target),
        Target::Session(_) => app.store.session_dir(&target),
    };
    let committed = tokio::task::spawn_blocking(move || {
        sink.commit(declared.as_deref(), &target, &target_dir, source, &mime, metadata)
    })
    .await;
    match committed {
        Ok(Ok((rec, created))) => {
            let status = if created { StatusCode::CREATED } else { StatusCode::OK };
            let body = ObjectBuilder::new().set("created", created).set("media", Value::Object(rec.to_object())).build();
            json(status, body)
        }
        Ok(Err(e)) => store_error(e),
        Err(e) => internal(e),
    }
}
