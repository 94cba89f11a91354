//! Acceptance suite. Runs headless against in-process servers and the
//! `demoforge` binary, printing one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use demoforge::catalog::Catalog;
use demoforge::client::{self, Api, ScriptRun};
use demoforge::script::{self, Script};
use demoforge::store::{self, ExportFilter, Store};
use demoforge::sha256_hex;
use demoforge_core::ik::IkParams;
use demoforge_core::protocol::{
    decode_message, encode_message, ControlAction, ControlCommand, EeDelta, ErrorCode, ErrorMessage, GripperAction,
    HelloAck, RecordingEvent, RecordingPhase, TeleopCommand, TeleopPayload, MAX_ANGULAR_DELTA, MAX_LINEAR_DELTA,
};
use demoforge_core::sim::GripperState;
use demoforge_core::{JointConfig, Message, Pose, Quat, RobotModel, SimFrame, Vec3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const JACOBIAN_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const JACOBIAN_CONFIGS: usize = 100;
const IK_TARGETS_PER_ROBOT: usize = 200;
const POS_TOL: f64 = 1e-4;
const ROT_TOL: f64 = 1e-3;
const ROUND_TRIPS: u32 = 10_000;
const LIVE_RUN: Duration = Duration::from_secs(10);
const DECIMATION: u64 = 3;
const LATENCY_SAMPLES: usize = 100;
const LATENCY_BOUND: Duration = Duration::from_millis(150);

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, name: &str, started: Instant, outcome: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name:<34} {detail} [{secs:.1}s]");
            }
        }
        let _ = std::io::stdout().flush();
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(started: Instant, limit: Duration, detail: String) -> Outcome {
    let took = started.elapsed();
    ensure(took < limit, || format!("{detail}; took {took:?}, limit {limit:?}"))?;
    Ok(detail)
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let mut report = Report { failed: 0 };
    let work = tempfile::tempdir().unwrap();

    let t = Instant::now();
    report.record("kinematics", t, kinematics().and_then(|d| within_time(t, Duration::from_secs(10), d)));

    let t = Instant::now();
    let fixtures = work.path().join("fixtures");
    let det = rt.block_on(determinism(&fixtures, &work.path().join("twin")));
    report.record("determinism", t, det.and_then(|d| within_time(t, Duration::from_secs(30), d)));

    let t = Instant::now();
    report.record("protocol round-trip and fuzz", t, protocol_codec());
    let t = Instant::now();
    report.record("protocol ordering (live run)", t, rt.block_on(live_ordering(&work.path().join("live"))));

    let t = Instant::now();
    report.record("service session isolation", t, rt.block_on(isolation(work.path())));
    let t = Instant::now();
    report.record("service crash recovery", t, crash_recovery(&work.path().join("crash")));
    let t = Instant::now();
    report.record("service media idempotence", t, rt.block_on(media_idempotence(&work.path().join("media"))));
    let t = Instant::now();
    report.record("service sha256 cross-check", t, digest_cross_check(&fixtures));

    let t = Instant::now();
    report.record("latency", t, rt.block_on(latency(&work.path().join("latency"))));

    let t = Instant::now();
    report.record("export", t, export(&fixtures, work.path()));

    println!("acceptance: {} failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}

// Kinematics

fn random_q(m: &RobotModel, rng: &mut StdRng, margin: f64) -> JointConfig {
    JointConfig(m.joints().iter().map(|j| rng.random_range(j.limit_lo + margin..=j.limit_hi - margin)).collect())
}

fn fd_jacobian(m: &RobotModel, q: &JointConfig) -> Vec<[f64; 6]> {
    (0..m.dof())
        .map(|i| {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus.0[i] += FD_STEP;
            minus.0[i] -= FD_STEP;
            let a = m.forward_kinematics(&plus).unwrap().ee_pose;
            let b = m.forward_kinematics(&minus).unwrap().ee_pose;
            let lin = (a.position - b.position) * (0.5 / FD_STEP);
            let ang = (a.orientation * b.orientation.conjugate()).to_scaled_axis() * (0.5 / FD_STEP);
            [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z]
        })
        .collect()
}

fn reach(m: &RobotModel) -> f64 {
    let zero = JointConfig(vec![0.0; m.dof()]);
    let mut total = 0.0;
    let fk = m.forward_kinematics(&zero).unwrap();
    let mut prev = Vec3::new(0.0, 0.0, 0.0);
    for p in fk.link_poses.iter().chain(std::iter::once(&fk.ee_pose)) {
        total += (p.position - prev).norm();
        prev = p.position;
    }
    total
}

fn kinematics() -> Outcome {
    let catalog = Catalog::bundled();
    let mut rng = StdRng::seed_from_u64(2024);
    let params = IkParams::default();
    let mut jac_checks = 0;
    let mut worst_jac: f64 = 0.0;
    let mut round_trips = 0;
    let mut unreachable = 0;
    for name in ["planar2", "planar3", "arm7"] {
        let m = catalog.robot(name).ok_or(format!("missing robot {name}"))?;
        for _ in 0..JACOBIAN_CONFIGS {
            let q = random_q(m, &mut rng, 0.0);
            let jac = m.jacobian(&q).map_err(|e| e.to_string())?;
            for (c, col) in fd_jacobian(m, &q).iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    worst_jac = worst_jac.max((jac.get(r, c) - v).abs());
                }
            }
            jac_checks += 1;
        }
        ensure(worst_jac <= JACOBIAN_TOL, || format!("{name}: jacobian off by {worst_jac:e}"))?;

        for i in 0..IK_TARGETS_PER_ROBOT {
            let q = random_q(m, &mut rng, 0.1);
            let target = m.forward_kinematics(&q).unwrap().ee_pose;
            let seed = JointConfig(q.values().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect());
            let seed = m.clamp_to_limits(&seed).unwrap();
            let r = m.solve_ik_dls(&target, &seed, &params).map_err(|e| e.to_string())?;
            let got = m.forward_kinematics(&r.solution).unwrap().ee_pose;
            let dp = (got.position - target.position).norm();
            let dr = (target.orientation * got.orientation.conjugate()).angle();
            ensure(r.converged && dp <= POS_TOL && dr <= ROT_TOL, || {
                format!("{name} target {i}: converged={} pos {dp:e} rot {dr:e}", r.converged)
            })?;
            round_trips += 1;
        }

        let bound = reach(m);
        let far = Pose::from_translation(Vec3::new(bound + 1.0, 0.0, 0.0));
        let seed = m.clamp_to_limits(&JointConfig(vec![0.0; m.dof()])).unwrap();
        let r = m.solve_ik_dls(&far, &seed, &IkParams::position_only()).map_err(|e| e.to_string())?;
        ensure(!r.converged && r.position_error() >= 1.0 - POS_TOL, || {
            format!("{name}: target beyond reach {bound:.3} reported converged={} residual {}", r.converged, r.position_error())
        })?;
        unreachable += 1;
    }
    Ok(format!(
        "{jac_checks} jacobians (max err {worst_jac:.1e}), {round_trips} FK/IK round trips, {unreachable} unreachable targets flagged"
    ))
}

// Determinism

async fn record_all(api: &Api, scripts: &[Script]) -> Result<Vec<ScriptRun>, String> {
    let runs = scripts.iter().map(|s| {
        let api = api.clone();
        let s = s.clone();
        tokio::spawn(async move {
            let session = api.create_session(&s.scene, s.robot.as_deref()).await.map_err(|e| e.to_string())?;
            let mut conn = api.connect(&session, "acceptance").await.map_err(|e| e.to_string())?;
            let run = client::run_script(&mut conn, &s).await.map_err(|e| format!("{}: {e}", s.label))?;
            conn.close().await;
            Ok::<_, String>(run)
        })
    });
    let mut out = Vec::new();
    for r in futures::future::join_all(runs).await {
        out.push(r.map_err(|e| e.to_string())??);
    }
    Ok(out)
}

fn bundled_scripts() -> Vec<Script> {
    script::BUNDLED.iter().map(|(n, _)| script::bundled(n).unwrap()).collect()
}

fn frames_log(data: &Path, episode: &str) -> Vec<u8> {
    std::fs::read(Store::new(data).episode_dir(episode).join("frames.log")).unwrap_or_default()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demoforge"))
}

async fn determinism(fixtures: &Path, twin: &Path) -> Outcome {
    let scripts = bundled_scripts();
    let (a, api_a) = common::server(fixtures).await;
    let (b, api_b) = common::server(twin).await;
    let (ra, rb) = tokio::join!(record_all(&api_a, &scripts), record_all(&api_b, &scripts));
    a.shutdown().await.map_err(|e| e.to_string())?;
    b.shutdown().await.map_err(|e| e.to_string())?;
    let (ra, rb) = (ra?, rb?);
    for ((s, x), y) in scripts.iter().zip(&ra).zip(&rb) {
        let (fx, fy) = (frames_log(fixtures, &x.episode_id), frames_log(twin, &y.episode_id));
        ensure(!fx.is_empty() && fx == fy, || format!("{}: frame logs of the two servers differ", s.label))?;
    }
    for (s, run) in scripts.iter().zip(&ra) {
        let out = bin()
            .arg("--data-dir")
            .arg(fixtures)
            .args(["replay", "--check", &run.episode_id])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("replay --check {} ({}): {}", run.episode_id, s.label, String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(format!("{} scripts byte-identical across two servers; replay --check passed on {} fixtures", ra.len(), ra.len()))
}

// Protocol

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, -1.0f64..1.0, Just(0.0), any::<f64>().prop_filter("finite", |v| v.is_finite())]
}

fn pose() -> impl Strategy<Value = Pose> {
    (finite(), finite(), finite(), -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-degenerate rotation", |t| t.3.abs() + t.4.abs() + t.5.abs() + t.6.abs() > 0.1)
        .prop_map(|(x, y, z, w, i, j, k)| {
            let n = (w * w + i * i + j * j + k * k).sqrt();
            Pose { position: Vec3::new(x, y, z), orientation: Quat { w: w / n, x: i / n, y: j / n, z: k / n } }
        })
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,11}"
}

fn message() -> impl Strategy<Value = Message> {
    let lin = -MAX_LINEAR_DELTA..=MAX_LINEAR_DELTA;
    let ang = -MAX_ANGULAR_DELTA..=MAX_ANGULAR_DELTA;
    let payload = prop_oneof![
        (lin.clone(), lin.clone(), lin, ang.clone(), ang.clone(), ang)
            .prop_map(|(dx, dy, dz, droll, dpitch, dyaw)| TeleopPayload::EeDelta(EeDelta { dx, dy, dz, droll, dpitch, dyaw })),
        pose().prop_map(TeleopPayload::PoseTarget),
        prop_oneof![Just(GripperAction::Open), Just(GripperAction::Close)].prop_map(TeleopPayload::Gripper),
    ];
    let frame = (
        any::<u64>(),
        finite(),
        any::<u64>(),
        prop::collection::vec(finite(), 1..8),
        pose(),
        any::<bool>(),
        prop::option::of(ident()),
        prop::collection::btree_map(ident(), pose(), 0..4),
    )
        .prop_map(|(tick, sim_time, seq, q, ee_pose, closed, grasped_object, objects)| SimFrame {
            tick,
            sim_time,
            seq,
            joint_config: JointConfig(q),
            ee_pose,
            gripper: if closed { GripperState::Closed } else { GripperState::Open },
            grasped_object,
            object_poses: objects.into_iter().collect::<BTreeMap<_, _>>(),
        });
    prop_oneof![
        (any::<u32>(), any::<String>()).prop_map(|(protocol_version, client_kind)| Message::Hello { protocol_version, client_kind }),
        (any::<String>(), "[0-9a-f]{64}", finite(), any::<u32>()).prop_map(|(session_id, scene_digest, dt, stream_rate_hz)| {
            Message::HelloAck(HelloAck { session_id, scene_digest, dt, stream_rate_hz })
        }),
        (any::<u64>(), prop::option::of(any::<u64>()), payload)
            .prop_map(|(client_seq, at_tick, payload)| Message::Teleop(TeleopCommand { client_seq, at_tick, payload })),
        (
            any::<u64>(),
            prop::option::of(any::<u64>()),
            prop_oneof![
                Just(ControlAction::Reset),
                Just(ControlAction::RecordStop),
                any::<String>().prop_map(|label| ControlAction::RecordStart { label }),
            ]
        )
            .prop_map(|(client_seq, at_tick, action)| Message::Control(ControlCommand { client_seq, at_tick, action })),
        frame.prop_map(Message::State),
        (any::<String>(), any::<bool>(), any::<u64>()).prop_map(|(episode_id, started, tick)| {
            let phase = if started { RecordingPhase::Started } else { RecordingPhase::Stopped };
            Message::Recording(RecordingEvent { episode_id, phase, tick })
        }),
        (prop::sample::select(ErrorCode::ALL.to_vec()), any::<String>())
            .prop_map(|(code, detail)| Message::Error(ErrorMessage { code, detail })),
        any::<u64>().prop_map(|nonce| Message::Ping { nonce }),
        any::<u64>().prop_map(|nonce| Message::Pong { nonce }),
    ]
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn protocol_codec() -> Outcome {
    runner(ROUND_TRIPS)
        .run(&message(), |m| {
            let text = encode_message(&m).unwrap();
            let back = decode_message(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode_message(&back).unwrap(), text);
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;
    runner(ROUND_TRIPS)
        .run(&prop::collection::vec(any::<u8>(), 0..512), |bytes| {
            let _ = decode_message(&String::from_utf8_lossy(&bytes));
            Ok(())
        })
        .map_err(|e| format!("byte fuzz: {e}"))?;
    runner(ROUND_TRIPS)
        .run(&(message(), prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6)), |(m, edits)| {
            let mut bytes = encode_message(&m).unwrap().into_bytes();
            for (i, b) in edits {
                if bytes.is_empty() {
                    break;
                }
                let at = i.index(bytes.len());
                match b % 3 {
                    0 => bytes[at] = b,
                    1 => {
                        bytes.remove(at);
                    }
                    _ => bytes.truncate(at),
                }
            }
            let _ = decode_message(&String::from_utf8_lossy(&bytes));
            Ok(())
        })
        .map_err(|e| format!("mutation fuzz: {e}"))?;
    Ok(format!("{ROUND_TRIPS} round trips, {ROUND_TRIPS} random and {ROUND_TRIPS} mutated byte strings decoded without abort"))
}

async fn live_ordering(dir: &Path) -> Outcome {
    let (server, api) = common::server(dir).await;
    let session = api.create_session("tabletop", None).await.map_err(|e| e.to_string())?;
    let mut conn = api.connect(&session, "observer").await.map_err(|e| e.to_string())?;
    let seen = client::observe(&mut conn, LIVE_RUN).await.map_err(|e| e.to_string())?;
    conn.close().await;
    server.shutdown().await.map_err(|e| e.to_string())?;
    let expected = (LIVE_RUN.as_secs_f64() * 60.0 / DECIMATION as f64) as usize;
    ensure(seen.len() * 10 >= expected * 9, || format!("only {} frames in {LIVE_RUN:?}", seen.len()))?;
    for w in seen.windows(2) {
        let ((s0, t0), (s1, t1)) = (w[0], w[1]);
        ensure(s1 > s0, || format!("seq {s1} after {s0}"))?;
        ensure(t1 == t0 + DECIMATION, || format!("tick {t1} after {t0}"))?;
        ensure(t1 % DECIMATION == 0, || format!("tick {t1} off the decimation grid"))?;
    }
    Ok(format!("{} frames over {LIVE_RUN:?}, seq strictly increasing, tick step {DECIMATION}", seen.len()))
}

// Service

async fn isolation(work: &Path) -> Outcome {
    let pair: Vec<Script> = ["pick_and_place", "shelf_lift"].iter().map(|n| script::bundled(n).unwrap()).collect();

    let (shared, api) = common::server(&work.join("shared")).await;
    let interleaved = {
        let a = api.create_session(&pair[0].scene, None).await.map_err(|e| e.to_string())?;
        let b = api.create_session(&pair[1].scene, None).await.map_err(|e| e.to_string())?;
        let mut ca = api.connect(&a, "left").await.map_err(|e| e.to_string())?;
        let mut cb = api.connect(&b, "right").await.map_err(|e| e.to_string())?;
        let (ra, rb) = tokio::join!(client::run_script(&mut ca, &pair[0]), client::run_script(&mut cb, &pair[1]));
        vec![ra.map_err(|e| e.to_string())?, rb.map_err(|e| e.to_string())?]
    };
    shared.shutdown().await.map_err(|e| e.to_string())?;

    let mut alone = Vec::new();
    for (i, s) in pair.iter().enumerate() {
        let dir = work.join(format!("alone{i}"));
        let (server, api) = common::server(&dir).await;
        let run = record_all(&api, std::slice::from_ref(s)).await?.remove(0);
        server.shutdown().await.map_err(|e| e.to_string())?;
        alone.push(sha256_hex(&frames_log(&dir, &run.episode_id)));
    }
    for (i, s) in pair.iter().enumerate() {
        let together = sha256_hex(&frames_log(&work.join("shared"), &interleaved[i].episode_id));
        ensure(together == alone[i], || format!("{}: concurrent {together} vs isolated {}", s.label, alone[i]))?;
    }
    Ok(format!("{} concurrent sessions match their isolated digests", pair.len()))
}

struct ServeProcess {
    child: Child,
    api: Api,
}

impl ServeProcess {
    fn start(data: &Path) -> Result<Self, String> {
        let mut child = bin()
            .arg("--data-dir")
            .arg(data)
            .args(["serve", "--bind", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        let addr = line.trim().strip_prefix("listening on ").ok_or(format!("unexpected banner {line:?}"))?.to_string();
        Ok(ServeProcess { child, api: Api::new(&format!("http://{addr}")) })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn crash_recovery(data: &Path) -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let first = ServeProcess::start(data)?;
    let episode = rt.block_on(async {
        let session = first.api.create_session("tabletop", None).await.map_err(|e| e.to_string())?;
        let mut conn = first.api.connect(&session, "crash").await.map_err(|e| e.to_string())?;
        conn.control(ControlAction::RecordStart { label: "crash".into() }, None).await.map_err(|e| e.to_string())?;
        let episode = loop {
            if let Message::Recording(ev) = conn.recv().await.map_err(|e| e.to_string())? {
                break ev.episode_id;
            }
        };
        let push = TeleopPayload::EeDelta(EeDelta { dx: 0.01, dy: 0.01, dz: 0.0, droll: 0.0, dpitch: 0.0, dyaw: 0.0 });
        for _ in 0..20 {
            conn.teleop(push.clone(), None).await.map_err(|e| e.to_string())?;
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        conn.teleop(TeleopPayload::Gripper(GripperAction::Close), None).await.map_err(|e| e.to_string())?;
        tokio::time::sleep(Duration::from_millis(300)).await;
        Ok::<_, String>(episode)
    })?;
    first.kill();
    let second = ServeProcess::start(data)?;
    second.kill();

    let store = Store::new(data);
    let m = store.manifest(&episode).map_err(|e| e.to_string())?;
    ensure(m.recovered && !m.finalized && m.frame_count > 0, || {
        format!("manifest after restart: recovered={} finalized={} frames={}", m.recovered, m.finalized, m.frame_count)
    })?;
    let dir = store.episode_dir(&episode);
    let report = store::validate_episode(&dir);
    ensure(report.ok(), || format!("validate: {report}"))?;
    let replay = store::replay_episode(&dir, &Catalog::bundled()).map_err(|e| e.to_string())?;
    ensure(replay.matches(), || format!("replay diverges at {:?}", replay.divergence))?;
    Ok(format!("killed mid-recording; restart recovered {} frames / {} actions, valid and replayable", m.frame_count, m.action_count))
}

async fn media_idempotence(dir: &Path) -> Outcome {
    let (server, api) = common::server(dir).await;
    let session = api.create_session("shelf", None).await.map_err(|e| e.to_string())?;
    let start = format!("/api/v1/sessions/{session}/recording/start");
    let (status, started) = api.post(&start, Default::default()).await.map_err(|e| e.to_string())?;
    ensure(status == 200, || format!("recording start answered {status}"))?;
    let episode = started["episode_id"].as_str().unwrap_or_default().to_string();
    tokio::time::sleep(Duration::from_millis(200)).await;
    let stop = format!("/api/v1/sessions/{session}/recording/stop");
    api.post(&stop, Default::default()).await.map_err(|e| e.to_string())?;

    let mut rng = StdRng::seed_from_u64(7);
    let body: Vec<u8> = (0..200_000).map(|_| rng.random()).collect();
    let mut ids = Vec::new();
    let mut statuses = Vec::new();
    for target in [&episode, &episode, &session] {
        let (status, r) = api
            .post_raw(&format!("/api/v1/media/{target}"), &[("content-type", "video/mp4")], body.clone())
            .await
            .map_err(|e| e.to_string())?;
        statuses.push(status);
        ids.push(r["media"]["media_id"].as_str().unwrap_or_default().to_string());
    }
    let mut other = body.clone();
    other[0] ^= 1;
    let (_, r) = api.post_raw(&format!("/api/v1/media/{episode}"), &[], other).await.map_err(|e| e.to_string())?;
    let different = r["media"]["media_id"].as_str().unwrap_or_default().to_string();
    server.shutdown().await.map_err(|e| e.to_string())?;

    ensure(statuses[..2] == [201, 200], || format!("upload statuses {statuses:?}"))?;
    ensure(!ids[0].is_empty() && ids.iter().all(|i| *i == ids[0]), || format!("media ids {ids:?}"))?;
    ensure(different != ids[0] && !different.is_empty(), || "changed bytes reused the media id".into())?;
    let blobs = std::fs::read_dir(dir.join("media").join("blobs")).map(|d| d.count()).unwrap_or(0);
    Ok(format!("same bytes gave {} three times (statuses {statuses:?}); one flipped bit gave {different}; {blobs} stored blobs", ids[0]))
}

fn sha256sum(path: &Path) -> Result<String, String> {
    let out = Command::new("sha256sum").arg(path).output().map_err(|e| format!("sha256sum: {e}"))?;
    ensure(out.status.success(), || format!("sha256sum {} failed", path.display()))?;
    let text = String::from_utf8_lossy(&out.stdout);
    Ok(text.split_whitespace().next().unwrap_or_default().to_string())
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                files_under(&p, out);
            } else {
                out.push(p);
            }
        }
    }
}

fn digest_cross_check(fixtures: &Path) -> Outcome {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(99);
    let mut checked = 0;
    for len in [0usize, 1, 55, 56, 63, 64, 65, 1000, 1 << 20] {
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let path = scratch.path().join(format!("b{len}"));
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let (ours, theirs) = (sha256_hex(&bytes), sha256sum(&path)?);
        ensure(ours == theirs, || format!("{len} bytes: {ours} vs {theirs}"))?;
        checked += 1;
    }
    let store = Store::new(fixtures);
    let ids = store.episode_ids().map_err(|e| e.to_string())?;
    ensure(!ids.is_empty(), || "no fixture episodes".into())?;
    for id in &ids {
        let m = store.manifest(id).map_err(|e| e.to_string())?;
        let copy = sha256sum(&store.episode_dir(id).join("scene.copy"))?;
        ensure(copy == m.scene_digest, || format!("{id}: scene.copy {copy} vs manifest {}", m.scene_digest))?;
        checked += 1;
    }
    let media = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(media_idempotence(media.path()))?;
    let mut blobs = Vec::new();
    files_under(&media.path().join("media").join("blobs"), &mut blobs);
    let store = Store::new(media.path());
    let mut blob_checks = 0;
    for p in blobs {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit()) {
            let theirs = sha256sum(&p)?;
            ensure(theirs == name, || format!("blob {name} hashes to {theirs}"))?;
            let rec = store.media_record(&name).map_err(|e| e.to_string())?.ok_or(format!("no record for {name}"))?;
            ensure(rec.content_digest == theirs, || format!("record digest {} vs {theirs}", rec.content_digest))?;
            blob_checks += 1;
        }
    }
    ensure(blob_checks >= 2, || format!("found {blob_checks} media blobs"))?;
    Ok(format!("{} digests match sha256sum ({blob_checks} media blobs)", checked + blob_checks))
}

// Latency

async fn latency(dir: &Path) -> Outcome {
    let (server, api) = common::server(dir).await;
    let session = api.create_session("tabletop", None).await.map_err(|e| e.to_string())?;
    let mut conn = api.connect(&session, "probe").await.map_err(|e| e.to_string())?;
    let samples = client::latency_probe(&mut conn, LATENCY_SAMPLES).await.map_err(|e| e.to_string())?;
    conn.close().await;
    server.shutdown().await.map_err(|e| e.to_string())?;
    let (p50, p95) = (client::percentile(&samples, 50.0), client::percentile(&samples, 95.0));
    let detail = format!("{} samples, p50 {:.1} ms, p95 {:.1} ms", samples.len(), ms(p50), ms(p95));
    ensure(p95 < LATENCY_BOUND, || format!("{detail}; bound {} ms", ms(LATENCY_BOUND)))?;
    Ok(detail)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

// Export

fn export(fixtures: &Path, work: &Path) -> Outcome {
    let store = Store::new(fixtures);
    let (a, b) = (work.join("export-a"), work.join("export-b"));
    let sa = store::export_dataset(&store, &ExportFilter::default(), &a).map_err(|e| e.to_string())?;
    let sb = store::export_dataset(&store, &ExportFilter::default(), &b).map_err(|e| e.to_string())?;
    ensure(sa == sb && !sa.episodes.is_empty(), || "export summaries differ".into())?;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files_under(&a, &mut fa);
    files_under(&b, &mut fb);
    fa.sort();
    fb.sort();
    ensure(fa.len() == fb.len(), || format!("{} vs {} files", fa.len(), fb.len()))?;
    for (x, y) in fa.iter().zip(&fb) {
        ensure(x.strip_prefix(&a).ok() == y.strip_prefix(&b).ok(), || format!("{} vs {}", x.display(), y.display()))?;
        ensure(std::fs::read(x).ok() == std::fs::read(y).ok(), || format!("{} differs", x.display()))?;
    }
    let mut rows = 0;
    for (id, n) in &sa.episodes {
        let m = store.manifest(id).map_err(|e| e.to_string())?;
        let lines = std::fs::read_to_string(a.join(format!("{id}.aligned.log"))).map_err(|e| e.to_string())?.lines().count();
        ensure(*n == m.frame_count && lines as u64 == m.frame_count, || {
            format!("{id}: {n} rows / {lines} lines vs {} frames", m.frame_count)
        })?;
        rows += n;
    }
    Ok(format!("{} files byte-identical across two exports; {rows} rows over {} episodes equal frame counts", fa.len(), sa.episodes.len()))
}
