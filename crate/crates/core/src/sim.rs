//! Deterministic fixed-timestep kinematic world: one robot tracking a
//! teleoperated end-effector target, static free objects, and proximity grasping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{Aabb, Pose, Quat, Vec3};
use crate::ik::{dls_update, pose_error};
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};
use crate::protocol::{GripperAction, TeleopPayload};

pub const DEFAULT_TICK_HZ: u32 = 60;
pub const DEFAULT_GRASP_RADIUS: f64 = 0.05;

/// Fixed simulation rate; `dt = 1 / hz` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickRate(u32);

impl Default for TickRate {
    fn default() -> Self {
        Self(DEFAULT_TICK_HZ)
    }
}

impl TickRate {
    pub fn new(hz: u32) -> Self {
        assert!(hz > 0, "tick rate must be positive");
        Self(hz)
    }

    pub fn hz(self) -> u32 {
        self.0
    }

    pub fn dt(self) -> f64 {
        1.0 / self.0 as f64
    }

    /// `tick / hz`, computed by one division so it never drifts.
    pub fn time_of(self, tick: u64) -> f64 {
        tick as f64 / self.0 as f64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown robot `{0}`")]
    UnknownRobot(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("step dt does not match the session rate ({expected} Hz)")]
    DtMismatch { expected: u32 },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box { size: Vec3 },
    Sphere { radius: f64 },
}

impl Shape {
    fn is_valid(&self) -> bool {
        match self {
            Shape::Box { size } => size.x > 0.0 && size.y > 0.0 && size.z > 0.0,
            Shape::Sphere { radius } => *radius > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: String,
    pub shape: Shape,
    pub initial_pose: Pose,
    pub graspable: bool,
}

/// How the end effector chases its target each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tracking {
    /// m/s cap on the Cartesian error fed to the per-tick IK update.
    pub max_ee_speed: f64,
    /// rad/s cap on the orientation error fed to the per-tick IK update.
    pub max_ee_angular_speed: f64,
    pub orientation_weight: f64,
    pub damping: f64,
    pub grasp_radius: f64,
}

impl Default for Tracking {
    fn default() -> Self {
        Self {
            max_ee_speed: 1.2,
            max_ee_angular_speed: 3.0,
            orientation_weight: 1.0,
            damping: 0.05,
            grasp_radius: DEFAULT_GRASP_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub robot: String,
    pub robot_initial: JointConfig,
    pub objects: Vec<ObjectSpec>,
    pub workspace_bounds: Aabb,
    pub task_prompt: Option<String>,
    pub goal_region: Option<Aabb>,
    pub tracking: Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    pub fn as_str(self) -> &'static str {
        match self {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(GripperState::Open),
            "closed" => Some(GripperState::Closed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grasp {
    pub object_id: String,
    /// Object pose in the end-effector frame, captured when the grasp closed.
    pub offset: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub tick: u64,
    /// Seq of the last emitted frame; 0 before the first.
    pub seq: u64,
    pub joint_config: JointConfig,
    pub ee_target: Pose,
    pub gripper: GripperState,
    /// Desired gripper state; resolved into `gripper` by the next step.
    pub gripper_command: GripperState,
    pub grasp: Option<Grasp>,
    pub object_poses: BTreeMap<String, Pose>,
}

impl WorldState {
    pub fn sim_time(&self, rate: TickRate) -> f64 {
        rate.time_of(self.tick)
    }

    pub fn grasped_object(&self) -> Option<&str> {
        self.grasp.as_ref().map(|g| g.object_id.as_str())
    }
}

/// One timestamped snapshot of world state, as streamed and logged.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub tick: u64,
    pub sim_time: f64,
    pub seq: u64,
    pub joint_config: JointConfig,
    pub ee_pose: Pose,
    pub gripper: GripperState,
    pub grasped_object: Option<String>,
    pub object_poses: BTreeMap<String, Pose>,
}

/// Something applied to the world at a tick boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Teleop(TeleopPayload),
    Reset,
}

pub trait RobotRegistry {
    fn robot(&self, name: &str) -> Option<&RobotModel>;
}

impl RobotRegistry for BTreeMap<String, RobotModel> {
    fn robot(&self, name: &str) -> Option<&RobotModel> {
        self.get(name)
    }
}

/// Immutable context of one simulated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    scene: SceneSpec,
    model: RobotModel,
    rate: TickRate,
}

impl World {
    /// Resolves the scene's robot in `registry` and validates the scene.
    pub fn load(
        scene: SceneSpec,
        registry: &impl RobotRegistry,
        rate: TickRate,
    ) -> Result<(World, WorldState), SimError> {
        let model = registry
            .robot(&scene.robot)
            .ok_or_else(|| SimError::UnknownRobot(scene.robot.clone()))?
            .clone();
        Self::with_model(scene, model, rate)
    }

    pub fn with_model(
        scene: SceneSpec,
        model: RobotModel,
        rate: TickRate,
    ) -> Result<(World, WorldState), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScene(m.into()));
        if !scene.workspace_bounds.is_valid() {
            return bad("workspace bounds must have min < max on every axis");
        }
        if let Some(goal) = &scene.goal_region {
            if !goal.is_valid() {
                return bad("goal region must have min < max on every axis");
            }
        }
        if scene.robot_initial.len() != model.dof() {
            return bad("robot_initial length does not match the robot's joint count");
        }
        if !model.within_limits(&scene.robot_initial) {
            return bad("robot_initial is outside the joint limits");
        }
        let t = &scene.tracking;
        if !(t.max_ee_speed > 0.0
            && t.max_ee_angular_speed > 0.0
            && t.damping > 0.0
            && t.grasp_radius > 0.0
            && t.orientation_weight >= 0.0)
        {
            return bad("tracking parameters must be positive");
        }
        for (i, o) in scene.objects.iter().enumerate() {
            if scene.objects[..i].iter().any(|p| p.id == o.id) {
                return Err(SimError::InvalidScene(alloc::format!("duplicate object id `{}`", o.id)));
            }
            if !o.shape.is_valid() {
                return Err(SimError::InvalidScene(alloc::format!(
                    "object `{}` has non-positive dimensions",
                    o.id
                )));
            }
            if !scene.workspace_bounds.contains(o.initial_pose.position) {
                return Err(SimError::InvalidScene(alloc::format!(
                    "object `{}` starts outside the workspace bounds",
                    o.id
                )));
            }
        }
        let world = World { scene, model, rate };
        let state = world.initial_state(0, 0)?;
        if !world.scene.workspace_bounds.contains(state.ee_target.position) {
            return bad("initial end-effector pose is outside the workspace bounds");
        }
        Ok((world, state))
    }

    fn initial_state(&self, tick: u64, seq: u64) -> Result<WorldState, SimError> {
        let fk = self.model.forward_kinematics(&self.scene.robot_initial)?;
        Ok(WorldState {
            tick,
            seq,
            joint_config: self.scene.robot_initial.clone(),
            ee_target: fk.ee_pose,
            gripper: GripperState::Open,
            gripper_command: GripperState::Open,
            grasp: None,
            object_poses: self
                .scene
                .objects
                .iter()
                .map(|o| (o.id.clone(), o.initial_pose))
                .collect(),
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn rate(&self) -> TickRate {
        self.rate
    }

    /// Back to the scene's initial configuration. The tick and seq counters
    /// continue so that every stream stays monotone across resets.
    pub fn reset(&self, state: &WorldState) -> WorldState {
        self.initial_state(state.tick, state.seq)
            .expect("scene validated at load")
    }

    /// Updates the end-effector target or desired gripper state. Joints move only in [`World::step`].
    pub fn apply_teleop(&self, state: &WorldState, cmd: &TeleopPayload) -> WorldState {
        let mut next = state.clone();
        let bounds = &self.scene.workspace_bounds;
        match cmd {
            TeleopPayload::EeDelta(d) => {
                let target = &mut next.ee_target;
                target.position = bounds.clamp(target.position + Vec3::new(d.dx, d.dy, d.dz));
                let rot = Quat::from_rpy(d.droll, d.dpitch, d.dyaw);
                target.orientation = (rot * target.orientation).canonical();
            }
            TeleopPayload::PoseTarget(p) => {
                let mut q = p.orientation;
                let n2 = q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z;
                if (n2 - 1.0).abs() > 1e-12 {
                    q = q.canonical();
                }
                next.ee_target = Pose::new(bounds.clamp(p.position), q.positive_scalar());
            }
            TeleopPayload::Gripper(GripperAction::Open) => next.gripper_command = GripperState::Open,
            TeleopPayload::Gripper(GripperAction::Close) => next.gripper_command = GripperState::Closed,
        }
        next
    }

    pub fn apply_action(&self, state: &WorldState, action: &Action) -> WorldState {
        match action {
            Action::Teleop(cmd) => self.apply_teleop(state, cmd),
            Action::Reset => self.reset(state),
        }
    }

    /// Advances one tick: a velocity-bounded IK update toward the target,
    /// gripper resolution, grasped-object carry, then tick and seq increment.
    pub fn step(&self, state: &WorldState, rate: TickRate) -> Result<(WorldState, SimFrame), SimError> {
        if rate != self.rate {
            return Err(SimError::DtMismatch { expected: self.rate.hz() });
        }
        let dt = rate.dt();
        let mut next = state.clone();
        next.joint_config = self.tracking_update(&state.joint_config, &state.ee_target, dt)?;
        let ee = self.model.forward_kinematics(&next.joint_config)?.ee_pose;

        if next.gripper_command != next.gripper {
            match next.gripper_command {
                GripperState::Closed => {
                    next.grasp = self.grasp_candidate(&next, &ee);
                    next.gripper = GripperState::Closed;
                }
                GripperState::Open => {
                    // Released objects keep their last carried pose.
                    next.grasp = None;
                    next.gripper = GripperState::Open;
                }
            }
        }
        if let Some(g) = &next.grasp {
            let carried = ee.compose(&g.offset).canonical();
            next.object_poses.insert(g.object_id.clone(), carried);
        }
        next.tick += 1;
        next.seq += 1;
        let frame = self.frame_with_ee(&next, next.seq, ee);
        Ok((next, frame))
    }

    /// Pure projection of `state` plus its FK end-effector pose.
    pub fn snapshot(&self, state: &WorldState, seq: u64) -> SimFrame {
        let ee = self
            .model
            .forward_kinematics(&state.joint_config)
            .expect("state matches model")
            .ee_pose;
        self.frame_with_ee(state, seq, ee)
    }

    fn frame_with_ee(&self, state: &WorldState, seq: u64, ee_pose: Pose) -> SimFrame {
        SimFrame {
            tick: state.tick,
            sim_time: self.rate.time_of(state.tick),
            seq,
            joint_config: state.joint_config.clone(),
            ee_pose,
            gripper: state.gripper,
            grasped_object: state.grasp.as_ref().map(|g| g.object_id.clone()),
            object_poses: state.object_poses.clone(),
        }
    }

    /// One DLS iteration toward `target` with the Cartesian error capped per
    /// tick, then the joint step scaled so no joint exceeds `max_velocity·dt`.
    fn tracking_update(&self, q: &JointConfig, target: &Pose, dt: f64) -> Result<JointConfig, SimError> {
        let t = &self.scene.tracking;
        let frames = self.model.chain(q);
        let (dp, dr) = pose_error(target, &frames.ee);
        let dp = dp.clamp_norm(t.max_ee_speed * dt);
        let dr = dr.clamp_norm(t.max_ee_angular_speed * dt) * t.orientation_weight;
        let e = [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z];
        if e.iter().all(|v| *v == 0.0) {
            return Ok(q.clone());
        }
        let jac = frames.jacobian(self.model.joints());
        let dq = dls_update(&jac, &e, t.damping, t.orientation_weight);

        let mut scale: f64 = 1.0;
        for (j, d) in self.model.joints().iter().zip(&dq) {
            let cap = j.max_velocity * dt;
            if d.abs() > cap {
                scale = scale.min(cap / d.abs());
            }
        }
        let moved: Vec<f64> = q.values().iter().zip(&dq).map(|(v, d)| v + d * scale).collect();
        Ok(self.model.clamp_to_limits(&JointConfig(moved))?)
    }

    /// Nearest graspable object within the grasp radius; ties go to the smallest id.
    fn grasp_candidate(&self, state: &WorldState, ee: &Pose) -> Option<Grasp> {
        let radius = self.scene.tracking.grasp_radius;
        let mut best: Option<(f64, &str)> = None;
        for o in self.scene.objects.iter().filter(|o| o.graspable) {
            let Some(pose) = state.object_poses.get(&o.id) else { continue };
            let d = (pose.position - ee.position).norm();
            if d > radius {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && o.id.as_str() < bid),
            };
            if better {
                best = Some((d, o.id.as_str()));
            }
        }
        let (_, id) = best?;
        let obj = state.object_poses[id];
        Some(Grasp { object_id: id.into(), offset: ee.inverse().compose(&obj) })
    }
}
