//! Episode records shared by the recorder and the replayer: action events,
//! the world state captured at recording start, and deterministic replay.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde_json::{Map, Value};

use crate::codec::{self, CodecError, CodecResult, Fields, ObjectBuilder};
use crate::protocol::{self, TeleopPayload};
use crate::sim::{Action, GripperState, Grasp, SimError, SimFrame, World, WorldState};
use crate::kinematics::JointConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Teleop,
    Reset,
    Gripper,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Teleop => "teleop",
            ActionKind::Reset => "reset",
            ActionKind::Gripper => "gripper",
        }
    }

    pub fn of(action: &Action) -> Self {
        match action {
            Action::Reset => ActionKind::Reset,
            Action::Teleop(TeleopPayload::Gripper(_)) => ActionKind::Gripper,
            Action::Teleop(_) => ActionKind::Teleop,
        }
    }
}

/// One applied action, keyed by the tick of the frame its step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEvent {
    pub tick: u64,
    pub action: Action,
    pub client_seq: Option<u64>,
    /// Connection that sent the command (`"c<n>"`), or `"http"`.
    pub origin: String,
}

impl ActionEvent {
    pub fn kind(&self) -> ActionKind {
        ActionKind::of(&self.action)
    }

    pub fn to_object(&self) -> CodecResult<Map<String, Value>> {
        let payload = match &self.action {
            Action::Teleop(p) => protocol::payload_object(p)?,
            Action::Reset => ObjectBuilder::tagged("reset").build(),
        };
        Ok(ObjectBuilder::new()
            .set("client_seq", self.client_seq.map_or(Value::Null, Value::from))
            .set("kind", self.kind().as_str())
            .set("origin", self.origin.as_str())
            .set("payload", Value::Object(payload))
            .set("tick", self.tick)
            .build())
    }

    pub fn encode(&self) -> CodecResult<String> {
        Ok(codec::to_canonical(self.to_object()?))
    }

    pub fn from_value(v: Value) -> CodecResult<Self> {
        let mut f = Fields::from_value(v, "action")?;
        let tick = f.u64("tick")?;
        let client_seq = f.opt_u64("client_seq")?;
        let origin = f.string("origin")?;
        let kind = f.string("kind")?;
        let mut p = f.object("payload")?;
        let tag = p.string("t")?;
        let action = if tag == "reset" {
            Action::Reset
        } else {
            Action::Teleop(protocol::read_payload(&tag, &mut p)?)
        };
        p.finish()?;
        f.finish()?;
        let ev = ActionEvent { tick, action, client_seq, origin };
        if ev.kind().as_str() != kind {
            return Err(CodecError::schema(format!("action.kind `{kind}` does not match payload")));
        }
        Ok(ev)
    }

    pub fn decode(text: &str) -> CodecResult<Self> {
        Self::from_value(Value::Object(codec::parse_object(text)?))
    }
}

/// Full world state, including fields frames do not carry (target, pending
/// gripper command, grasp offset). Stored when a recording opens so replay
/// can start from the exact same state.
pub fn state_to_value(s: &WorldState) -> CodecResult<Value> {
    let objects: Map<String, Value> = s
        .object_poses
        .iter()
        .map(|(k, p)| Ok((k.clone(), codec::pose(p)?)))
        .collect::<CodecResult<_>>()?;
    let grasp = match &s.grasp {
        None => Value::Null,
        Some(g) => Value::Object(
            ObjectBuilder::new()
                .set("object", g.object_id.as_str())
                .set("offset", codec::pose(&g.offset)?)
                .build(),
        ),
    };
    Ok(Value::Object(
        ObjectBuilder::new()
            .set("ee_target", codec::pose(&s.ee_target)?)
            .set("grasp", grasp)
            .set("gripper", s.gripper.as_str())
            .set("gripper_command", s.gripper_command.as_str())
            .set("objects", Value::Object(objects))
            .set("q", codec::nums(s.joint_config.values())?)
            .set("seq", s.seq)
            .set("tick", s.tick)
            .build(),
    ))
}

pub fn state_from_value(v: Value) -> CodecResult<WorldState> {
    let mut f = Fields::from_value(v, "state")?;
    let gripper = |s: String| {
        GripperState::parse(&s).ok_or_else(|| CodecError::schema(format!("state: unknown gripper `{s}`")))
    };
    let grasp = match f.take_opt("grasp") {
        None => None,
        Some(v) => {
            let mut g = Fields::from_value(v, "state.grasp")?;
            let grasp = Grasp { object_id: g.string("object")?, offset: g.pose("offset")? };
            g.finish()?;
            Some(grasp)
        }
    };
    let s = WorldState {
        tick: f.u64("tick")?,
        seq: f.u64("seq")?,
        joint_config: JointConfig(f.f64s("q")?),
        ee_target: f.pose("ee_target")?,
        gripper: gripper(f.string("gripper")?)?,
        gripper_command: gripper(f.string("gripper_command")?)?,
        grasp,
        object_poses: f.pose_map("objects")?,
    };
    f.finish()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("action at tick {tick} is outside the replayed range")]
    ActionOutOfRange { tick: u64 },
    #[error("actions are not ordered by tick")]
    Unordered,
    #[error("start state does not match the scene's robot")]
    StateMismatch,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Re-simulates `frame_count` ticks from `start`, applying each action before
/// the step that produces the frame with the action's tick.
pub fn replay(
    world: &World,
    start: &WorldState,
    actions: &[ActionEvent],
    frame_count: u64,
) -> Result<Vec<SimFrame>, ReplayError> {
    if start.joint_config.len() != world.model().dof() {
        return Err(ReplayError::StateMismatch);
    }
    if actions.windows(2).any(|w| w[0].tick > w[1].tick) {
        return Err(ReplayError::Unordered);
    }
    let first = start.tick + 1;
    let last = start.tick + frame_count;
    if let Some(a) = actions.iter().find(|a| a.tick < first || a.tick > last) {
        return Err(ReplayError::ActionOutOfRange { tick: a.tick });
    }
    let mut state = start.clone();
    let mut frames = Vec::with_capacity(frame_count as usize);
    let mut pending = actions.iter().peekable();
    for _ in 0..frame_count {
        let tick = state.tick + 1;
        while let Some(a) = pending.next_if(|a| a.tick == tick) {
            state = world.apply_action(&state, &a.action);
        }
        let (next, frame) = world.step(&state, world.rate())?;
        state = next;
        frames.push(frame);
    }
    Ok(frames)
}

/// First position where two frame streams differ, by tick of the recorded stream.
pub fn first_divergence(recorded: &[SimFrame], replayed: &[SimFrame]) -> Option<u64> {
    for (a, b) in recorded.iter().zip(replayed) {
        if a != b {
            return Some(a.tick);
        }
    }
    match recorded.len().cmp(&replayed.len()) {
        core::cmp::Ordering::Equal => None,
        core::cmp::Ordering::Greater => Some(recorded[replayed.len()].tick),
        core::cmp::Ordering::Less => Some(replayed[recorded.len()].tick),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use crate::protocol::{EeDelta, GripperAction};
    use crate::sim::fixtures::{object, world};
    use alloc::vec;

    fn ev(tick: u64, action: Action) -> ActionEvent {
        ActionEvent { tick, action, client_seq: Some(tick), origin: "c1".into() }
    }

    fn delta(dx: f64, dy: f64) -> Action {
        Action::Teleop(TeleopPayload::EeDelta(EeDelta { dx, dy, dz: 0.0, droll: 0.0, dpitch: 0.0, dyaw: 0.0 }))
    }

    #[test]
    fn action_event_round_trip() {
        for a in [
            ev(3, delta(0.01, -0.02)),
            ev(4, Action::Reset),
            ev(5, Action::Teleop(TeleopPayload::Gripper(GripperAction::Close))),
            ActionEvent { tick: 9, action: Action::Teleop(TeleopPayload::PoseTarget(Pose::IDENTITY)), client_seq: None, origin: "http".into() },
        ] {
            let text = a.encode().unwrap();
            assert_eq!(ActionEvent::decode(&text).unwrap(), a, "{text}");
        }
    }

    #[test]
    fn action_kind_must_match_payload() {
        let text = r#"{"client_seq":1,"kind":"teleop","origin":"c1","payload":{"t":"reset"},"tick":1}"#;
        assert!(ActionEvent::decode(text).is_err());
    }

    #[test]
    fn state_round_trip() {
        let (w, s) = world(vec![object("box1", 0.5, 0.5)]);
        let mut s = w.apply_teleop(&s, &TeleopPayload::Gripper(GripperAction::Close));
        s.grasp = Some(Grasp { object_id: "box1".into(), offset: Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)) });
        let back = state_from_value(state_to_value(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn replay_matches_live_stepping() {
        let (w, s0) = world(vec![object("box1", 0.5, 0.5)]);
        let actions = vec![ev(1, delta(0.05, 0.0)), ev(1, delta(0.0, 0.05)), ev(7, Action::Reset), ev(9, delta(-0.05, 0.0))];
        let mut live = Vec::new();
        let mut s = s0.clone();
        for _ in 0..12 {
            let tick = s.tick + 1;
            for a in actions.iter().filter(|a| a.tick == tick) {
                s = w.apply_action(&s, &a.action);
            }
            let (n, f) = w.step(&s, w.rate()).unwrap();
            s = n;
            live.push(f);
        }
        let replayed = replay(&w, &s0, &actions, 12).unwrap();
        assert_eq!(first_divergence(&live, &replayed), None);
        assert_eq!(replayed.len(), 12);
    }

    #[test]
    fn replay_rejects_out_of_range_actions() {
        let (w, s0) = world(vec![]);
        assert_eq!(
            replay(&w, &s0, &[ev(5, Action::Reset)], 3).unwrap_err(),
            ReplayError::ActionOutOfRange { tick: 5 }
        );
        assert_eq!(
            replay(&w, &s0, &[ev(2, Action::Reset), ev(1, Action::Reset)], 3).unwrap_err(),
            ReplayError::Unordered
        );
        assert!(replay(&w, &s0, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn divergence_reports_tick() {
        let (w, s0) = world(vec![]);
        let a = replay(&w, &s0, &[], 5).unwrap();
        let mut b = a.clone();
        b[3].joint_config.0[0] += 1e-12;
        assert_eq!(first_divergence(&a, &b), Some(4));
        assert_eq!(first_divergence(&a, &a[..4]), Some(5));
    }
}
