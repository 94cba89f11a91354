//! Serial-chain robot description, forward kinematics and the geometric Jacobian.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{Pose, Vec3};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("robot has no joints")]
    NoJoints,
    #[error("duplicate joint name `{0}`")]
    DuplicateJoint(String),
    #[error("joint `{0}`: limit_lo must be strictly below limit_hi")]
    InvalidLimits(String),
    #[error("joint `{0}`: axis is zero")]
    ZeroAxis(String),
    #[error("joint `{0}`: axis is not unit length")]
    NonUnitAxis(String),
    #[error("joint `{0}`: max_velocity must be strictly positive")]
    InvalidVelocity(String),
    #[error("{0}: orientation is not a unit quaternion")]
    NonUnitQuaternion(String),
    #[error("{0}: non-finite value")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint configuration has {got} values, model has {expected} joints")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

impl JointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Unit axis in the joint frame.
    pub axis: Vec3,
    /// Parent link frame to joint frame.
    pub origin: Pose,
    pub limit_lo: f64,
    pub limit_hi: f64,
    pub max_velocity: f64,
}

impl JointSpec {
    /// Transform contributed by moving this joint to `value`.
    fn motion(&self, value: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => Pose::new(
                Vec3::ZERO,
                crate::geometry::Quat::from_axis_angle(self.axis, value),
            ),
            JointKind::Prismatic => Pose::from_translation(self.axis * value),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let finite = self.axis.is_finite()
            && self.origin.is_finite()
            && self.limit_lo.is_finite()
            && self.limit_hi.is_finite()
            && self.max_velocity.is_finite();
        if !finite {
            return Err(ModelError::NonFinite(self.name.clone()));
        }
        if !(self.limit_lo < self.limit_hi) {
            return Err(ModelError::InvalidLimits(self.name.clone()));
        }
        let n = self.axis.norm();
        if n == 0.0 {
            return Err(ModelError::ZeroAxis(self.name.clone()));
        }
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(ModelError::NonUnitAxis(self.name.clone()));
        }
        if !(self.max_velocity > 0.0) {
            return Err(ModelError::InvalidVelocity(self.name.clone()));
        }
        check_unit(&self.origin, &self.name)
    }
}

fn check_unit(p: &Pose, what: &str) -> Result<(), ModelError> {
    if !p.is_finite() {
        return Err(ModelError::NonFinite(what.into()));
    }
    if (p.orientation.norm() - 1.0).abs() > UNIT_TOL {
        return Err(ModelError::NonUnitQuaternion(what.into()));
    }
    Ok(())
}

/// Joint values in model order; radians for revolute joints, meters for prismatic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(alloc::vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    name: String,
    joints: Vec<JointSpec>,
    base_pose: Pose,
    ee_offset: Pose,
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<JointSpec>,
        base_pose: Pose,
        ee_offset: Pose,
    ) -> Result<Self, ModelError> {
        if joints.is_empty() {
            return Err(ModelError::NoJoints);
        }
        for (i, j) in joints.iter().enumerate() {
            if joints[..i].iter().any(|o| o.name == j.name) {
                return Err(ModelError::DuplicateJoint(j.name.clone()));
            }
            j.validate()?;
        }
        check_unit(&base_pose, "base_pose")?;
        check_unit(&ee_offset, "ee_offset")?;
        Ok(Self { name: name.into(), joints, base_pose, ee_offset })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn base_pose(&self) -> &Pose {
        &self.base_pose
    }

    pub fn ee_offset(&self) -> &Pose {
        &self.ee_offset
    }

    fn check_len(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::LengthMismatch { expected: self.dof(), got: q.len() });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.len() == self.dof()
            && self.joints.iter().zip(q.values()).all(|(j, &v)| v >= j.limit_lo && v <= j.limit_hi)
    }

    /// Clamps every value into its joint's `[limit_lo, limit_hi]`.
    pub fn clamp_to_limits(&self, q: &JointConfig) -> Result<JointConfig, KinematicsError> {
        self.check_len(q)?;
        Ok(JointConfig(
            self.joints
                .iter()
                .zip(q.values())
                .map(|(j, &v)| v.max(j.limit_lo).min(j.limit_hi))
                .collect(),
        ))
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> Result<ForwardKinematics, KinematicsError> {
        self.check_len(q)?;
        Ok(self.chain(q).into_fk())
    }

    /// Column `i` is `(z_i × (p_ee − p_i), z_i)` for revolute and `(z_i, 0)` for prismatic joints.
    pub fn jacobian(&self, q: &JointConfig) -> Result<Jacobian, KinematicsError> {
        self.check_len(q)?;
        Ok(self.chain(q).jacobian(&self.joints))
    }

    pub(crate) fn chain(&self, q: &JointConfig) -> ChainFrames {
        let mut frames = Vec::with_capacity(self.dof());
        let mut links = Vec::with_capacity(self.dof());
        let mut t = self.base_pose;
        for (j, &v) in self.joints.iter().zip(q.values()) {
            t = t.compose(&j.origin);
            frames.push(t);
            t = t.compose(&j.motion(v));
            links.push(t);
        }
        let ee = t.compose(&self.ee_offset);
        ChainFrames { joint_frames: frames, links, ee }
    }
}

/// Intermediate frames of one FK evaluation.
pub(crate) struct ChainFrames {
    /// Joint frames before the joint's own motion.
    joint_frames: Vec<Pose>,
    links: Vec<Pose>,
    pub(crate) ee: Pose,
}

impl ChainFrames {
    fn into_fk(self) -> ForwardKinematics {
        ForwardKinematics {
            ee_pose: self.ee.canonical(),
            link_poses: self.links.iter().map(Pose::canonical).collect(),
        }
    }

    pub(crate) fn jacobian(&self, joints: &[JointSpec]) -> Jacobian {
        let p_ee = self.ee.position;
        let columns = joints
            .iter()
            .zip(&self.joint_frames)
            .map(|(j, f)| {
                let z = f.orientation.rotate(j.axis);
                match j.kind {
                    JointKind::Revolute => {
                        let lin = z.cross(p_ee - f.position);
                        [lin.x, lin.y, lin.z, z.x, z.y, z.z]
                    }
                    JointKind::Prismatic => [z.x, z.y, z.z, 0.0, 0.0, 0.0],
                }
            })
            .collect();
        Jacobian { columns }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardKinematics {
    pub ee_pose: Pose,
    /// Pose of each link frame (after the joint's motion), one per joint.
    pub link_poses: Vec<Pose>,
}

/// 6×n geometric Jacobian stored column-major. Rows are linear x, y, z then angular x, y, z.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub columns: Vec<[f64; 6]>,
}

impl Jacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }
}
