//! Command schedules for the headless client.
//!
//! ```toml
//! scene = "tabletop"
//! label = "pick-and-place"
//! duration = 240          # recorded ticks
//!
//! [[at]]
//! tick = 0                # relative to the first recorded tick
//! cmd = "pose_target"
//! xyz = [0.7, -0.2, 0.0]
//!
//! [[at]]
//! tick = 80
//! cmd = "gripper"
//! action = "close"
//! ```
//!
//! Commands: `ee_delta` (`dx dy dz droll dpitch dyaw`, default 0),
//! `pose_target` (`xyz`, `rpy`), `gripper` (`action = "open" | "close"`), `reset`.
//! Rows run in file order; ticks must not decrease and must be below `duration`.
//! Delta magnitudes are not checked here: the server is the authority.

use demoforge_core::protocol::{EeDelta, GripperAction, TeleopPayload};
use demoforge_core::record::{self, ReplayError};
use demoforge_core::{Action, ActionEvent, Pose, SimFrame};
use serde::Deserialize;

use crate::catalog::{DocError, SceneEntry};

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptCommand {
    Teleop(TeleopPayload),
    Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptStep {
    pub tick: u64,
    pub command: ScriptCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub scene: String,
    pub robot: Option<String>,
    pub label: String,
    pub duration: u64,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    tick: u64,
    cmd: String,
    dx: Option<f64>,
    dy: Option<f64>,
    dz: Option<f64>,
    droll: Option<f64>,
    dpitch: Option<f64>,
    dyaw: Option<f64>,
    xyz: Option<[f64; 3]>,
    rpy: Option<[f64; 3]>,
    action: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    scene: String,
    robot: Option<String>,
    label: Option<String>,
    duration: u64,
    #[serde(default)]
    at: Vec<Row>,
}

impl Script {
    pub fn parse(text: &str, origin: &str) -> Result<Script, DocError> {
        let doc: Doc = toml::from_str(text).map_err(|source| DocError::Parse { origin: origin.into(), source })?;
        let bad = |i: usize, msg: String| DocError::Invalid { origin: origin.into(), msg: format!("at[{i}]: {msg}") };
        let mut steps = Vec::with_capacity(doc.at.len());
        for (i, r) in doc.at.into_iter().enumerate() {
            if r.tick >= doc.duration {
                return Err(bad(i, format!("tick {} is not below duration {}", r.tick, doc.duration)));
            }
            if steps.last().is_some_and(|s: &ScriptStep| s.tick > r.tick) {
                return Err(bad(i, format!("tick {} goes backwards", r.tick)));
            }
            let delta = [r.dx, r.dy, r.dz, r.droll, r.dpitch, r.dyaw];
            let has_delta = delta.iter().any(Option::is_some);
            let extra = |allowed: [bool; 3]| {
                let present = [has_delta, r.xyz.is_some() || r.rpy.is_some(), r.action.is_some()];
                present.iter().zip(allowed).any(|(p, a)| *p && !a)
            };
            let command = match r.cmd.as_str() {
                "ee_delta" if !extra([true, false, false]) => {
                    let v = delta.map(|d| d.unwrap_or(0.0));
                    ScriptCommand::Teleop(TeleopPayload::EeDelta(EeDelta {
                        dx: v[0],
                        dy: v[1],
                        dz: v[2],
                        droll: v[3],
                        dpitch: v[4],
                        dyaw: v[5],
                    }))
                }
                "pose_target" if !extra([false, true, false]) => {
                    let xyz = r.xyz.ok_or_else(|| bad(i, "pose_target needs `xyz`".into()))?;
                    ScriptCommand::Teleop(TeleopPayload::PoseTarget(Pose::from_xyz_rpy(xyz, r.rpy.unwrap_or_default())))
                }
                "gripper" if !extra([false, false, true]) => match r.action.as_deref() {
                    Some("open") => ScriptCommand::Teleop(TeleopPayload::Gripper(GripperAction::Open)),
                    Some("close") => ScriptCommand::Teleop(TeleopPayload::Gripper(GripperAction::Close)),
                    other => return Err(bad(i, format!("gripper action must be open or close, got {other:?}"))),
                },
                "reset" if !extra([false, false, false]) => ScriptCommand::Reset,
                "ee_delta" | "pose_target" | "gripper" | "reset" => {
                    return Err(bad(i, format!("fields do not belong to `{}`", r.cmd)))
                }
                other => return Err(bad(i, format!("unknown command `{other}`"))),
            };
            steps.push(ScriptStep { tick: r.tick, command });
        }
        Ok(Script { scene: doc.scene, robot: doc.robot, label: doc.label.unwrap_or_default(), duration: doc.duration, steps })
    }

    /// Actions as the server records them when the first recorded frame is
    /// `start_tick` and the client numbers `record_start` as 1 and each step after it.
    pub fn action_events(&self, start_tick: u64, origin: &str) -> Vec<ActionEvent> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| ActionEvent {
                tick: start_tick + s.tick,
                action: match &s.command {
                    ScriptCommand::Teleop(p) => Action::Teleop(p.clone()),
                    ScriptCommand::Reset => Action::Reset,
                },
                client_seq: Some(i as u64 + 2),
                origin: origin.to_string(),
            })
            .collect()
    }

    /// Offline run of the script on a fresh scene, recording from `start_tick`.
    pub fn simulate(&self, scene: &SceneEntry, start_tick: u64) -> Result<Vec<SimFrame>, ReplayError> {
        let (world, mut start) = scene.world();
        start.tick = start_tick - 1;
        start.seq = start_tick - 1;
        record::replay(&world, &start, &self.action_events(start_tick, "c1"), self.duration)
    }
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("pick_and_place", include_str!("../scripts/pick_and_place.toml")),
    ("reset_mid_recording", include_str!("../scripts/reset_mid_recording.toml")),
    ("zero_action", include_str!("../scripts/zero_action.toml")),
    ("reach_sweep", include_str!("../scripts/reach_sweep.toml")),
    ("shelf_lift", include_str!("../scripts/shelf_lift.toml")),
];

/// A bundled script by name.
pub fn bundled(name: &str) -> Option<Script> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, t)| Script::parse(t, n).expect("bundled scripts are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows() {
        let s = Script::parse(
            "scene = \"tabletop\"\nduration = 10\n[[at]]\ntick = 0\ncmd = \"ee_delta\"\ndx = 0.01\n[[at]]\ntick = 0\ncmd = \"reset\"\n[[at]]\ntick = 9\ncmd = \"gripper\"\naction = \"close\"\n",
            "t",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[1].command, ScriptCommand::Reset);
        assert_eq!(s.label, "");
        let ScriptCommand::Teleop(TeleopPayload::EeDelta(d)) = &s.steps[0].command else { panic!() };
        assert_eq!((d.dx, d.dy), (0.01, 0.0));
    }

    #[test]
    fn rejects_bad_rows() {
        let base = "scene = \"tabletop\"\nduration = 10\n";
        for rows in [
            "[[at]]\ntick = 10\ncmd = \"reset\"\n",
            "[[at]]\ntick = 5\ncmd = \"reset\"\n[[at]]\ntick = 4\ncmd = \"reset\"\n",
            "[[at]]\ntick = 1\ncmd = \"fly\"\n",
            "[[at]]\ntick = 1\ncmd = \"reset\"\ndx = 0.1\n",
            "[[at]]\ntick = 1\ncmd = \"gripper\"\naction = \"squeeze\"\n",
            "[[at]]\ntick = 1\ncmd = \"pose_target\"\n",
            "[[at]]\ntick = 1\ncmd = \"reset\"\nbogus = 1\n",
        ] {
            assert!(Script::parse(&format!("{base}{rows}"), "t").is_err(), "{rows}");
        }
    }

    #[test]
    fn out_of_range_delta_is_left_to_the_server() {
        let s = Script::parse("scene = \"tabletop\"\nduration = 5\n[[at]]\ntick = 0\ncmd = \"ee_delta\"\ndx = 0.5\n", "t");
        assert!(s.is_ok());
    }

    #[test]
    fn bundled_scripts_parse() {
        for (name, _) in BUNDLED {
            assert!(bundled(name).is_some());
        }
        assert!(bundled("zero_action").unwrap().steps.is_empty());
    }
}
