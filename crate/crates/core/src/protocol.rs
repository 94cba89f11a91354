//! Wire protocol v1: message types, canonical encoding and strict decoding.
//!
//! Every message is one canonical object (see [`crate::codec`]) carrying a
//! `"t"` type tag. Teleop and control commands carry a per-connection
//! `client_seq` and may carry `at_tick`, the tick whose boundary should apply
//! them; without it they apply at the next boundary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde_json::{Map, Value};

use crate::codec::{self, CodecError, CodecErrorKind, CodecResult, Fields, ObjectBuilder};
use crate::geometry::Pose;
use crate::kinematics::JointConfig;
use crate::sim::{GripperState, SimFrame};

pub const PROTOCOL_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[PROTOCOL_VERSION];
/// Per-message bound on each linear delta component, meters.
pub const MAX_LINEAR_DELTA: f64 = 0.1;
/// Per-message bound on each angular delta component, radians.
pub const MAX_ANGULAR_DELTA: f64 = 0.5;
const POSE_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EeDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperAction {
    Open,
    Close,
}

impl GripperAction {
    pub fn as_str(self) -> &'static str {
        match self {
            GripperAction::Open => "open",
            GripperAction::Close => "close",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeleopPayload {
    EeDelta(EeDelta),
    PoseTarget(Pose),
    Gripper(GripperAction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleopCommand {
    pub client_seq: u64,
    pub at_tick: Option<u64>,
    pub payload: TeleopPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    Reset,
    RecordStart { label: String },
    RecordStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlCommand {
    pub client_seq: u64,
    pub at_tick: Option<u64>,
    pub action: ControlAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordingPhase {
    Started,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingEvent {
    pub episode_id: String,
    pub phase: RecordingPhase,
    /// `Started`: tick of the first recorded frame. `Stopped`: last recorded tick.
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    VersionMismatch,
    ProtocolViolation,
    SchemaViolation,
    OutOfRange,
    StaleCommand,
    SessionClosed,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::VersionMismatch,
        ErrorCode::ProtocolViolation,
        ErrorCode::SchemaViolation,
        ErrorCode::OutOfRange,
        ErrorCode::StaleCommand,
        ErrorCode::SessionClosed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::VersionMismatch => "version_mismatch",
            ErrorCode::ProtocolViolation => "protocol_violation",
            ErrorCode::SchemaViolation => "schema_violation",
            ErrorCode::OutOfRange => "out_of_range",
            ErrorCode::StaleCommand => "stale_command",
            ErrorCode::SessionClosed => "session_closed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl From<&CodecError> for ErrorCode {
    fn from(e: &CodecError) -> Self {
        match e.kind {
            CodecErrorKind::OutOfRange => ErrorCode::OutOfRange,
            _ => ErrorCode::SchemaViolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub detail: String,
}

impl ErrorMessage {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self { code, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelloAck {
    pub session_id: String,
    pub scene_digest: String,
    pub dt: f64,
    pub stream_rate_hz: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { protocol_version: u32, client_kind: String },
    HelloAck(HelloAck),
    Teleop(TeleopCommand),
    Control(ControlCommand),
    State(SimFrame),
    Recording(RecordingEvent),
    Error(ErrorMessage),
    Ping { nonce: u64 },
    Pong { nonce: u64 },
}

impl Message {
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::HelloAck(_) => "hello_ack",
            Message::Teleop(c) => teleop_tag(&c.payload),
            Message::Control(c) => control_tag(&c.action),
            Message::State(_) => "state",
            Message::Recording(_) => "recording",
            Message::Error(_) => "error",
            Message::Ping { .. } => "ping",
            Message::Pong { .. } => "pong",
        }
    }

    /// `client_seq` of client→server commands.
    pub fn client_seq(&self) -> Option<u64> {
        match self {
            Message::Teleop(c) => Some(c.client_seq),
            Message::Control(c) => Some(c.client_seq),
            _ => None,
        }
    }
}

fn teleop_tag(p: &TeleopPayload) -> &'static str {
    match p {
        TeleopPayload::EeDelta(_) => "ee_delta",
        TeleopPayload::PoseTarget(_) => "pose_target",
        TeleopPayload::Gripper(_) => "gripper",
    }
}

fn control_tag(a: &ControlAction) -> &'static str {
    match a {
        ControlAction::Reset => "reset",
        ControlAction::RecordStart { .. } => "record_start",
        ControlAction::RecordStop => "record_stop",
    }
}

/// Canonical text of `m`. Fails only on non-finite numbers.
pub fn encode_message(m: &Message) -> CodecResult<String> {
    Ok(codec::to_canonical(message_object(m)?))
}

pub fn message_object(m: &Message) -> CodecResult<Map<String, Value>> {
    let b = ObjectBuilder::tagged(m.tag());
    let b = match m {
        Message::Hello { protocol_version, client_kind } => {
            b.set("client_kind", client_kind.as_str()).set("version", *protocol_version)
        }
        Message::HelloAck(a) => b
            .set("session_id", a.session_id.as_str())
            .set("scene_digest", a.scene_digest.as_str())
            .set("stream_rate_hz", a.stream_rate_hz)
            .num("dt", a.dt)?,
        Message::Teleop(c) => {
            let b = b.set("client_seq", c.client_seq).set_opt("at_tick", c.at_tick);
            payload_fields(b, &c.payload)?
        }
        Message::Control(c) => {
            let b = b.set("client_seq", c.client_seq).set_opt("at_tick", c.at_tick);
            match &c.action {
                ControlAction::RecordStart { label } => b.set("label", label.as_str()),
                ControlAction::Reset | ControlAction::RecordStop => b,
            }
        }
        Message::State(f) => return frame_object(f),
        Message::Recording(r) => b
            .set("episode_id", r.episode_id.as_str())
            .set(
                "event",
                match r.phase {
                    RecordingPhase::Started => "started",
                    RecordingPhase::Stopped => "stopped",
                },
            )
            .set("tick", r.tick),
        Message::Error(e) => b.set("code", e.code.as_str()).set("detail", e.detail.as_str()),
        Message::Ping { nonce } | Message::Pong { nonce } => b.set("nonce", *nonce),
    };
    Ok(b.build())
}

fn payload_fields(b: ObjectBuilder, p: &TeleopPayload) -> CodecResult<ObjectBuilder> {
    Ok(match p {
        TeleopPayload::EeDelta(d) => b
            .num("dx", d.dx)?
            .num("dy", d.dy)?
            .num("dz", d.dz)?
            .num("droll", d.droll)?
            .num("dpitch", d.dpitch)?
            .num("dyaw", d.dyaw)?,
        TeleopPayload::PoseTarget(p) => b.set("pose", codec::pose(p)?),
        TeleopPayload::Gripper(a) => b.set("action", a.as_str()),
    })
}

/// Teleop payload as a standalone tagged object (used by the action log).
pub fn payload_object(p: &TeleopPayload) -> CodecResult<Map<String, Value>> {
    Ok(payload_fields(ObjectBuilder::tagged(teleop_tag(p)), p)?.build())
}

pub fn frame_object(f: &SimFrame) -> CodecResult<Map<String, Value>> {
    let objects: Map<String, Value> = f
        .object_poses
        .iter()
        .map(|(k, p)| Ok((k.clone(), codec::pose(p)?)))
        .collect::<CodecResult<_>>()?;
    Ok(ObjectBuilder::tagged("state")
        .set("ee", codec::pose(&f.ee_pose)?)
        .set("grasped", f.grasped_object.as_deref().map_or(Value::Null, Value::from))
        .set("gripper", f.gripper.as_str())
        .set("objects", Value::Object(objects))
        .set("q", codec::nums(f.joint_config.values())?)
        .set("seq", f.seq)
        .set("tick", f.tick)
        .num("time", f.sim_time)?
        .build())
}

pub fn encode_frame(f: &SimFrame) -> CodecResult<String> {
    Ok(codec::to_canonical(frame_object(f)?))
}

/// Strict decode of one wire message.
pub fn decode_message(text: &str) -> CodecResult<Message> {
    decode_object(codec::parse_object(text)?)
}

pub fn decode_object(mut map: Map<String, Value>) -> CodecResult<Message> {
    let tag = match map.remove("t") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(CodecError::schema("t: expected string")),
        None => return Err(CodecError::schema("missing type tag `t`")),
    };
    let mut f = Fields::new(map, tag.clone());
    let msg = match tag.as_str() {
        "hello" => {
            let v = f.u64("version")?;
            let protocol_version =
                u32::try_from(v).map_err(|_| CodecError::schema("hello.version: too large"))?;
            Message::Hello { protocol_version, client_kind: f.string("client_kind")? }
        }
        "hello_ack" => {
            let rate = f.u64("stream_rate_hz")?;
            Message::HelloAck(HelloAck {
                session_id: f.string("session_id")?,
                scene_digest: f.string("scene_digest")?,
                dt: f.f64("dt")?,
                stream_rate_hz: u32::try_from(rate)
                    .map_err(|_| CodecError::schema("hello_ack.stream_rate_hz: too large"))?,
            })
        }
        "ee_delta" | "pose_target" | "gripper" => {
            let client_seq = f.u64("client_seq")?;
            let at_tick = f.opt_u64("at_tick")?;
            let payload = read_payload(&tag, &mut f)?;
            Message::Teleop(TeleopCommand { client_seq, at_tick, payload })
        }
        "reset" | "record_start" | "record_stop" => {
            let client_seq = f.u64("client_seq")?;
            let at_tick = f.opt_u64("at_tick")?;
            let action = match tag.as_str() {
                "reset" => ControlAction::Reset,
                "record_start" => ControlAction::RecordStart { label: f.string("label")? },
                _ => ControlAction::RecordStop,
            };
            Message::Control(ControlCommand { client_seq, at_tick, action })
        }
        "state" => Message::State(read_frame(&mut f)?),
        "recording" => {
            let phase = match f.string("event")?.as_str() {
                "started" => RecordingPhase::Started,
                "stopped" => RecordingPhase::Stopped,
                other => return Err(CodecError::schema(format!("recording.event: unknown `{other}`"))),
            };
            Message::Recording(RecordingEvent { episode_id: f.string("episode_id")?, phase, tick: f.u64("tick")? })
        }
        "error" => {
            let code = f.string("code")?;
            let code = ErrorCode::parse(&code)
                .ok_or_else(|| CodecError::schema(format!("error.code: unknown `{code}`")))?;
            Message::Error(ErrorMessage { code, detail: f.string("detail")? })
        }
        "ping" => Message::Ping { nonce: f.u64("nonce")? },
        "pong" => Message::Pong { nonce: f.u64("nonce")? },
        other => {
            return Err(CodecError::new(CodecErrorKind::UnknownType, format!("unknown message type `{other}`")))
        }
    };
    f.finish()?;
    Ok(msg)
}

/// Reads a teleop payload whose tag has already been removed from `f`.
pub fn read_payload(tag: &str, f: &mut Fields) -> CodecResult<TeleopPayload> {
    Ok(match tag {
        "ee_delta" => {
            let d = EeDelta {
                dx: f.f64("dx")?,
                dy: f.f64("dy")?,
                dz: f.f64("dz")?,
                droll: f.f64("droll")?,
                dpitch: f.f64("dpitch")?,
                dyaw: f.f64("dyaw")?,
            };
            check_delta(&d)?;
            TeleopPayload::EeDelta(d)
        }
        "pose_target" => {
            let p = f.pose("pose")?;
            if (p.orientation.norm() - 1.0).abs() > POSE_UNIT_TOL {
                return Err(CodecError::out_of_range("pose_target.pose: orientation is not a unit quaternion"));
            }
            TeleopPayload::PoseTarget(p)
        }
        "gripper" => match f.string("action")?.as_str() {
            "open" => TeleopPayload::Gripper(GripperAction::Open),
            "close" => TeleopPayload::Gripper(GripperAction::Close),
            other => return Err(CodecError::schema(format!("gripper.action: unknown `{other}`"))),
        },
        other => return Err(CodecError::new(CodecErrorKind::UnknownType, format!("unknown payload `{other}`"))),
    })
}

fn check_delta(d: &EeDelta) -> CodecResult<()> {
    for (name, v) in [("dx", d.dx), ("dy", d.dy), ("dz", d.dz)] {
        if v.abs() > MAX_LINEAR_DELTA {
            return Err(CodecError::out_of_range(format!(
                "ee_delta.{name}={v} exceeds {MAX_LINEAR_DELTA} m"
            )));
        }
    }
    for (name, v) in [("droll", d.droll), ("dpitch", d.dpitch), ("dyaw", d.dyaw)] {
        if v.abs() > MAX_ANGULAR_DELTA {
            return Err(CodecError::out_of_range(format!(
                "ee_delta.{name}={v} exceeds {MAX_ANGULAR_DELTA} rad"
            )));
        }
    }
    Ok(())
}

pub fn read_frame(f: &mut Fields) -> CodecResult<SimFrame> {
    let gripper = f.string("gripper")?;
    Ok(SimFrame {
        tick: f.u64("tick")?,
        sim_time: f.f64("time")?,
        seq: f.u64("seq")?,
        joint_config: JointConfig(f.f64s("q")?),
        ee_pose: f.pose("ee")?,
        gripper: GripperState::parse(&gripper)
            .ok_or_else(|| CodecError::schema(format!("state.gripper: unknown `{gripper}`")))?,
        grasped_object: f.opt_string("grasped")?,
        object_poses: f.pose_map("objects")?,
    })
}

/// Decodes a frame line as written to the frame log (a `state` message).
pub fn decode_frame(text: &str) -> CodecResult<SimFrame> {
    match decode_message(text)? {
        Message::State(f) => Ok(f),
        other => Err(CodecError::schema(format!("expected state frame, found `{}`", other.tag()))),
    }
}

/// Session parameters announced in [`HelloAck`].
#[derive(Debug, Clone, PartialEq)]
pub struct SessionParams {
    pub session_id: String,
    pub scene_digest: String,
    pub dt: f64,
    pub stream_rate_hz: u32,
}

/// Handshake rule: the first message must be `Hello` with a supported version.
pub fn negotiate(first: &Message, supported: &[u32], params: &SessionParams) -> Result<HelloAck, ErrorMessage> {
    match first {
        Message::Hello { protocol_version, .. } => {
            if supported.contains(protocol_version) {
                Ok(HelloAck {
                    session_id: params.session_id.clone(),
                    scene_digest: params.scene_digest.clone(),
                    dt: params.dt,
                    stream_rate_hz: params.stream_rate_hz,
                })
            } else {
                let list: Vec<String> = supported.iter().map(|v| format!("{v}")).collect();
                Err(ErrorMessage::new(
                    ErrorCode::VersionMismatch,
                    format!("protocol version {protocol_version} not in [{}]", list.join(",")),
                ))
            }
        }
        other => Err(ErrorMessage::new(
            ErrorCode::ProtocolViolation,
            format!("expected hello, got `{}`", other.tag()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn ping_encoding() {
        assert_eq!(encode_message(&Message::Ping { nonce: 7 }).unwrap(), r#"{"nonce":7,"t":"ping"}"#);
    }

    #[test]
    fn state_frame_layout() {
        let mut objects = BTreeMap::new();
        objects.insert("box1".to_string(), Pose::IDENTITY);
        let f = SimFrame {
            tick: 126,
            sim_time: 2.1,
            seq: 42,
            joint_config: JointConfig(vec![0.5, -0.25]),
            ee_pose: Pose::IDENTITY,
            gripper: GripperState::Open,
            grasped_object: None,
            object_poses: objects,
        };
        let text = encode_message(&Message::State(f.clone())).unwrap();
        assert_eq!(
            text,
            r#"{"ee":[0.0,0.0,0.0,1.0,0.0,0.0,0.0],"grasped":null,"gripper":"open","objects":{"box1":[0.0,0.0,0.0,1.0,0.0,0.0,0.0]},"q":[0.5,-0.25],"seq":42,"t":"state","tick":126,"time":2.1}"#
        );
        assert_eq!(decode_frame(&text).unwrap(), f);
    }

    #[test]
    fn decode_errors() {
        let kind = |s: &str| decode_message(s).unwrap_err().kind;
        assert_eq!(kind(r#"{"t":"gibberish"}"#), CodecErrorKind::UnknownType);
        assert_eq!(
            kind(r#"{"client_seq":1,"dpitch":0,"droll":0,"dx":0.5,"dy":0,"dyaw":0,"dz":0,"t":"ee_delta"}"#),
            CodecErrorKind::OutOfRange
        );
        assert_eq!(kind(r#"{"nonce":7,"t":"pi"#), CodecErrorKind::Malformed);
        assert_eq!(kind(r#"{"nonce":7,"t":"ping","x":1}"#), CodecErrorKind::Schema);
        assert_eq!(kind(r#"{"t":"ping"}"#), CodecErrorKind::Schema);
        assert_eq!(kind(r#"{"nonce":"7","t":"ping"}"#), CodecErrorKind::Schema);
        assert_eq!(kind(r#"{"nonce":-1,"t":"ping"}"#), CodecErrorKind::Schema);
        assert_eq!(kind(r#"{"nonce":1}"#), CodecErrorKind::Schema);
    }

    #[test]
    fn delta_bound_is_inclusive() {
        let ok = r#"{"client_seq":1,"dpitch":-0.5,"droll":0.5,"dx":0.1,"dy":-0.1,"dyaw":0,"dz":0,"t":"ee_delta"}"#;
        assert!(decode_message(ok).is_ok());
    }

    #[test]
    fn non_unit_pose_target_rejected() {
        let bad = r#"{"client_seq":1,"pose":[0,0,0,2,0,0,0],"t":"pose_target"}"#;
        assert_eq!(decode_message(bad).unwrap_err().kind, CodecErrorKind::OutOfRange);
    }

    #[test]
    fn encode_rejects_non_finite() {
        let m = Message::Teleop(TeleopCommand {
            client_seq: 1,
            at_tick: None,
            payload: TeleopPayload::EeDelta(EeDelta { dx: f64::NAN, dy: 0.0, dz: 0.0, droll: 0.0, dpitch: 0.0, dyaw: 0.0 }),
        });
        assert_eq!(encode_message(&m).unwrap_err().kind, CodecErrorKind::NonFinite);
    }

    fn params() -> SessionParams {
        SessionParams { session_id: "s1".into(), scene_digest: "ab".into(), dt: 1.0 / 60.0, stream_rate_hz: 20 }
    }

    #[test]
    fn negotiation() {
        let hello = Message::Hello { protocol_version: 1, client_kind: "ui".into() };
        let ack = negotiate(&hello, SUPPORTED_VERSIONS, &params()).unwrap();
        assert_eq!(ack.dt, 1.0 / 60.0);
        assert_eq!(ack.stream_rate_hz, 20);

        let v2 = Message::Hello { protocol_version: 2, client_kind: "ui".into() };
        assert_eq!(negotiate(&v2, SUPPORTED_VERSIONS, &params()).unwrap_err().code, ErrorCode::VersionMismatch);

        let ping = Message::Ping { nonce: 1 };
        assert_eq!(negotiate(&ping, SUPPORTED_VERSIONS, &params()).unwrap_err().code, ErrorCode::ProtocolViolation);
    }
}
