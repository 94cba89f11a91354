mod common;

use std::time::Duration;

use demoforge::client::{self, ClientError, Conn};
use demoforge::script::{self, Script};
use demoforge::store::{validate_episode, Store};
use demoforge_core::codec::ObjectBuilder;
use demoforge_core::protocol::{encode_frame, ControlAction, ErrorCode, GripperAction, TeleopPayload};
use demoforge_core::Message;
use serde_json::Value;

async fn next_error(conn: &mut Conn) -> ErrorCode {
    loop {
        match conn.recv_timeout(Duration::from_secs(5), "error").await.unwrap() {
            Message::Error(e) => return e.code,
            _ => continue,
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn catalog_and_session_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path());
    cfg.max_sessions = 2;
    let (server, api) = common::server_with(cfg).await;

    let (status, scenes) = api.get("/api/v1/scenes").await.unwrap();
    assert_eq!(status, 200);
    let names: Vec<&str> = scenes["scenes"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["reach2", "shelf", "tabletop"]);
    let (_, robots) = api.get("/api/v1/robots").await.unwrap();
    assert_eq!(robots["robots"].as_array().unwrap().len(), 3);

    let post = |body: Value| {
        let api = api.clone();
        async move { api.post("/api/v1/sessions", body.as_object().unwrap().clone()).await.unwrap().0 }
    };
    assert_eq!(post(serde_json::json!({"scene": "nowhere"})).await, 404);
    assert_eq!(post(serde_json::json!({"scene": "tabletop", "robot": "arm7"})).await, 400);
    assert_eq!(post(serde_json::json!({"scene": "tabletop", "colour": 1})).await, 400);
    assert_eq!(post(serde_json::json!({"scene": "tabletop", "robot": "planar3"})).await, 201);
    assert_eq!(post(serde_json::json!({"scene": "shelf"})).await, 201);
    assert_eq!(post(serde_json::json!({"scene": "shelf"})).await, 503);
    let (_, list) = api.get("/api/v1/sessions").await.unwrap();
    assert_eq!(list["sessions"].as_array().unwrap().len(), 2);
    assert_eq!(api.get("/api/v1/episodes/nope").await.unwrap().0, 404);
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn handshake_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (server, api) = common::server(dir.path()).await;
    let session = api.create_session("tabletop", None).await.unwrap();
    let url = api.ws_url(&session);

    let raw = |first: String| {
        let url = url.clone();
        async move {
            use futures::{SinkExt, StreamExt};
            use tokio_tungstenite::tungstenite::Message as Ws;
            let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
            ws.send(Ws::Text(first.into())).await.unwrap();
            let reply = match ws.next().await.unwrap().unwrap() {
                Ws::Text(t) => demoforge_core::decode_message(t.as_str()).unwrap(),
                other => panic!("{other:?}"),
            };
            let closed = matches!(ws.next().await, Some(Ok(Ws::Close(_))) | None | Some(Err(_)));
            (reply, closed)
        }
    };
    let (reply, closed) = raw(r#"{"nonce":1,"t":"ping"}"#.into()).await;
    assert!(matches!(reply, Message::Error(e) if e.code == ErrorCode::ProtocolViolation));
    assert!(closed);
    let (reply, closed) = raw(r#"{"client_kind":"x","version":99,"t":"hello"}"#.into()).await;
    assert!(matches!(&reply, Message::Error(e) if e.code == ErrorCode::VersionMismatch), "{reply:?}");
    assert!(closed);
    let (reply, _) = raw(r#"{"client_kind":"x","version":1,"t":"hello"}"#.into()).await;
    let Message::HelloAck(ack) = reply else { panic!() };
    assert_eq!((ack.session_id.as_str(), ack.stream_rate_hz), (session.as_str(), 20));
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn command_errors_keep_the_connection() {
    let dir = tempfile::tempdir().unwrap();
    let (server, api) = common::server(dir.path()).await;
    let (_, mut conn) = common::connect(&api, "tabletop").await;

    conn.send_text(r#"{"client_seq":1,"dx":0.5,"dy":0,"dz":0,"droll":0,"dpitch":0,"dyaw":0,"t":"ee_delta"}"#.into())
        .await
        .unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::OutOfRange);
    conn.send_text(r#"{"client_seq":2,"t":"gripper","action":"squeeze"}"#.into()).await.unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::SchemaViolation);
    conn.send_text(r#"{"client_seq":3,"t":"gripper","action":"close"}"#.into()).await.unwrap();
    conn.send_text(r#"{"client_seq":3,"t":"gripper","action":"open"}"#.into()).await.unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::StaleCommand);
    conn.send_text(r#"{"client_seq":4,"t":"reset","at_tick":1}"#.into()).await.unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::StaleCommand);
    conn.send_text(r#"{"client_seq":5,"t":"record_stop"}"#.into()).await.unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::ProtocolViolation);
    conn.send_text(r#"{"client_kind":"x","version":1,"t":"hello"}"#.into()).await.unwrap();
    let e = loop { if let Message::Error(e) = conn.recv().await.unwrap() { break e } };
    assert_eq!(e.code, ErrorCode::ProtocolViolation, "{e:?}");
    conn.send(&Message::Ping { nonce: 42 }).await.unwrap();
    loop {
        if let Message::Pong { nonce } = conn.recv().await.unwrap() {
            assert_eq!(nonce, 42);
            break;
        }
    }
    conn.teleop(TeleopPayload::Gripper(GripperAction::Open), None).await.unwrap();
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_recording_matches_offline_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let (server, api) = common::server(dir.path()).await;
    let script = script::bundled("pick_and_place").unwrap();
    let (_, mut conn) = common::connect(&api, &script.scene).await;
    let run = client::run_script(&mut conn, &script).await.unwrap();
    assert_eq!(run.end_tick, run.start_tick + script.duration - 1);

    let (status, frames) = api.get_bytes(&format!("/api/v1/episodes/{}/frames", run.episode_id)).await.unwrap();
    assert_eq!(status, 200);
    let entry = demoforge::catalog::Catalog::bundled();
    let expected: String = script
        .simulate(entry.scene("tabletop").unwrap(), run.start_tick)
        .unwrap()
        .iter()
        .map(|f| encode_frame(f).unwrap() + "\n")
        .collect();
    assert_eq!(String::from_utf8(frames).unwrap(), expected);

    let (_, view) = api.get(&format!("/api/v1/episodes/{}", run.episode_id)).await.unwrap();
    let m = &view["manifest"];
    assert_eq!(m["finalized"], Value::Bool(true));
    assert_eq!(m["action_count"].as_u64().unwrap(), script.steps.len() as u64);
    assert_eq!(m["contributors"], serde_json::json!(["tester"]));
    server.shutdown().await.unwrap();
    let store = Store::new(dir.path());
    assert!(validate_episode(&store.episode_dir(&run.episode_id)).ok());
}

#[tokio::test(flavor = "multi_thread")]
async fn late_script_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (server, api) = common::server(dir.path()).await;
    let (_, mut conn) = common::connect(&api, "tabletop").await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    conn.control(ControlAction::RecordStart { label: String::new() }, Some(2)).await.unwrap();
    assert_eq!(next_error(&mut conn).await, ErrorCode::StaleCommand);
    let text = "scene = \"tabletop\"\nduration = 3\n";
    let s = Script::parse(text, "t").unwrap();
    // A fresh connection still works.
    let (_, mut other) = common::connect(&api, "tabletop").await;
    assert!(client::run_script(&mut other, &s).await.is_ok());
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn http_recording_annotations_and_media() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path());
    cfg.media_cap_bytes = 1000;
    let (server, api) = common::server_with(cfg).await;
    let session = api.create_session("reach2", None).await.unwrap();
    let start = format!("/api/v1/sessions/{session}/recording/start");
    let stop = format!("/api/v1/sessions/{session}/recording/stop");
    let label = ObjectBuilder::new().set("label", "http").build();

    assert_eq!(api.post(&stop, Default::default()).await.unwrap().0, 409);
    let (status, started) = api.post(&start, label.clone()).await.unwrap();
    assert_eq!(status, 200, "{started:?}");
    let episode = started["episode_id"].as_str().unwrap().to_string();
    assert_eq!(api.post(&start, label).await.unwrap().0, 409);
    tokio::time::sleep(Duration::from_millis(200)).await;

    let annotate = |target: &str, anchor: Value| {
        let body = ObjectBuilder::new()
            .set("anchor", anchor)
            .set("kind", "task_description")
            .set("target", target)
            .set("text", "reach for a")
            .build();
        let api = api.clone();
        async move { api.post("/api/v1/annotations", body).await.unwrap() }
    };
    let start_tick = started["start_tick"].as_u64().unwrap();
    assert_eq!(annotate(&episode, serde_json::json!([start_tick, start_tick + 1])).await.0, 201);
    assert_eq!(annotate(&episode, serde_json::json!([start_tick + 1, start_tick])).await.0, 400);
    assert_eq!(annotate(&episode, serde_json::json!([start_tick, start_tick + 100_000])).await.0, 400);
    assert_eq!(annotate(&session, Value::Null).await.0, 201);
    assert_eq!(annotate("nobody", Value::Null).await.0, 404);

    let (status, stopped) = api.post(&stop, Default::default()).await.unwrap();
    assert_eq!(status, 200);
    let m = &stopped["manifest"];
    assert!(m["frame_count"].as_u64().unwrap() >= 6);
    assert_eq!(m["end_tick"].as_u64().unwrap(), start_tick + m["frame_count"].as_u64().unwrap() - 1);

    let media = format!("/api/v1/media/{episode}?task=reach");
    let body = b"not really a video".to_vec();
    let digest = demoforge::sha256_hex(&body);
    let (s1, r1) = api.post_raw(&media, &[("content-type", "video/mp4"), ("x-contributor", "cam")], body.clone()).await.unwrap();
    let (s2, r2) = api.post_raw(&media, &[("x-declared-digest", &digest)], body.clone()).await.unwrap();
    assert_eq!((s1, s2), (201, 200));
    assert_eq!(r1["media"], r2["media"]);
    assert_eq!(r1["media"]["content_digest"].as_str().unwrap(), digest);
    assert_eq!(r1["media"]["metadata"]["embodiment"].as_str().unwrap(), "planar2");
    let (s3, _) = api.post_raw(&media, &[("x-declared-digest", &"0".repeat(64))], b"other".to_vec()).await.unwrap();
    assert_eq!(s3, 422);
    let (s4, _) = api.post_raw(&media, &[], vec![0u8; 1001]).await.unwrap();
    assert_eq!(s4, 413);

    let (_, view) = api.get(&format!("/api/v1/episodes/{episode}")).await.unwrap();
    assert_eq!(view["annotations"].as_array().unwrap().len(), 1);
    assert_eq!(view["media"].as_array().unwrap().len(), 1);
    server.shutdown().await.unwrap();
    assert!(validate_episode(&Store::new(dir.path()).episode_dir(&episode)).ok());
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_finalizes_open_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let (server, api) = common::server(dir.path()).await;
    let (_, mut conn) = common::connect(&api, "shelf").await;
    conn.control(ControlAction::RecordStart { label: "open".into() }, None).await.unwrap();
    let episode = loop {
        if let Message::Recording(ev) = conn.recv().await.unwrap() {
            break ev.episode_id;
        }
    };
    tokio::time::sleep(Duration::from_millis(150)).await;
    server.shutdown().await.unwrap();
    let err = loop {
        match conn.recv().await {
            Ok(Message::Error(e)) => break e.code,
            Ok(_) => continue,
            Err(ClientError::Protocol(_)) => panic!("closed without error"),
            Err(e) => panic!("{e}"),
        }
    };
    assert_eq!(err, ErrorCode::SessionClosed);
    let store = Store::new(dir.path());
    let m = store.manifest(&episode).unwrap();
    assert!(m.finalized && m.frame_count > 0);
    assert!(validate_episode(&store.episode_dir(&episode)).ok());
}
