//! Damped-least-squares inverse kinematics.

use alloc::vec::Vec;

use crate::geometry::{Pose, Vec3};
use crate::kinematics::{Jacobian, JointConfig, KinematicsError, RobotModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkParams {
    /// Damping factor λ in `Jᵀ(JJᵀ + λ²I)⁻¹`.
    pub damping: f64,
    pub max_iterations: u32,
    /// Meters.
    pub pos_tol: f64,
    /// Radians.
    pub rot_tol: f64,
    /// In (0, 1].
    pub step_scale: f64,
    /// Scales the angular rows; 0 solves position-only targets.
    pub orientation_weight: f64,
    /// Per-iteration cap on the norm of the position (m) and orientation (rad)
    /// error, so far targets are approached in bounded steps.
    pub max_task_step: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 0.05,
            max_iterations: 100,
            pos_tol: 1e-4,
            rot_tol: 1e-3,
            step_scale: 1.0,
            orientation_weight: 1.0,
            max_task_step: 0.2,
        }
    }
}

impl IkParams {
    pub fn position_only() -> Self {
        Self { orientation_weight: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), IkError> {
        let ok = self.damping > 0.0
            && self.damping.is_finite()
            && self.max_iterations > 0
            && self.pos_tol > 0.0
            && self.rot_tol > 0.0
            && self.step_scale > 0.0
            && self.step_scale <= 1.0
            && self.orientation_weight >= 0.0
            && self.orientation_weight.is_finite()
            && self.max_task_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(IkError::InvalidParams)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum IkError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("target or seed contains non-finite values")]
    NonFinite,
    #[error("invalid IK parameters")]
    InvalidParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub solution: JointConfig,
    pub converged: bool,
    pub iterations: u32,
    /// Position error (m) then weighted orientation error (rad, axis-angle).
    pub residual: [f64; 6],
}

impl IkResult {
    pub fn position_error(&self) -> f64 {
        Vec3::new(self.residual[0], self.residual[1], self.residual[2]).norm()
    }

    pub fn orientation_error(&self) -> f64 {
        Vec3::new(self.residual[3], self.residual[4], self.residual[5]).norm()
    }
}

/// Twist error taking `current` to `target`: position difference and the
/// axis-angle of `target ∘ current⁻¹`.
pub fn pose_error(target: &Pose, current: &Pose) -> (Vec3, Vec3) {
    let dp = target.position - current.position;
    let dr = (target.orientation * current.orientation.conjugate()).to_scaled_axis();
    (dp, dr)
}

/// One DLS update `Jᵀ(JJᵀ + λ²I)⁻¹ e` for the 6-vector error `e`.
///
/// Angular rows of the Jacobian are multiplied by `orientation_weight`; `error`
/// must already be weighted the same way.
pub fn dls_update(jac: &Jacobian, error: &[f64; 6], damping: f64, orientation_weight: f64) -> Vec<f64> {
    let weighted: Vec<[f64; 6]> = jac
        .columns
        .iter()
        .map(|c| {
            let w = orientation_weight;
            [c[0], c[1], c[2], c[3] * w, c[4] * w, c[5] * w]
        })
        .collect();

    let mut a = [[0.0f64; 6]; 6];
    for c in &weighted {
        for r in 0..6 {
            for s in 0..=r {
                a[r][s] += c[r] * c[s];
            }
        }
    }
    let l2 = damping * damping;
    for (r, row) in a.iter_mut().enumerate() {
        row[r] += l2;
    }
    let y = solve_spd6(a, *error);
    weighted
        .iter()
        .map(|c| c.iter().zip(&y).map(|(a, b)| a * b).sum())
        .collect()
}

/// Cholesky solve of a symmetric positive-definite 6×6 system; reads the lower triangle only.
fn solve_spd6(a: [[f64; 6]; 6], b: [f64; 6]) -> [f64; 6] {
    let mut l = [[0.0f64; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][i] = libm::sqrt(sum);
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = [0.0; 6];
    for i in 0..6 {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let mut sum = y[i];
        for k in i + 1..6 {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

fn weighted_error(target: &Pose, current: &Pose, w: f64) -> [f64; 6] {
    let (dp, dr) = pose_error(target, current);
    [dp.x, dp.y, dp.z, dr.x * w, dr.y * w, dr.z * w]
}

fn clamp_task_error(e: &[f64; 6], max: f64) -> [f64; 6] {
    let p = Vec3::new(e[0], e[1], e[2]).clamp_norm(max);
    let r = Vec3::new(e[3], e[4], e[5]).clamp_norm(max);
    [p.x, p.y, p.z, r.x, r.y, r.z]
}

fn norm6(e: &[f64; 6]) -> f64 {
    libm::sqrt(e.iter().map(|v| v * v).sum())
}

fn within_tol(e: &[f64; 6], params: &IkParams) -> bool {
    let p = Vec3::new(e[0], e[1], e[2]).norm();
    let r = Vec3::new(e[3], e[4], e[5]).norm();
    p <= params.pos_tol && r <= params.rot_tol
}

impl RobotModel {
    /// Iterates `q ← clamp(q + s·Jᵀ(JJᵀ + λ²I)⁻¹ e)`, with `e` capped at
    /// `max_task_step` per iteration, until both tolerances hold
    /// or the iteration budget runs out, in which case the best iterate seen is
    /// returned with `converged = false`.
    pub fn solve_ik_dls(
        &self,
        target: &Pose,
        seed: &JointConfig,
        params: &IkParams,
    ) -> Result<IkResult, IkError> {
        params.validate()?;
        if seed.len() != self.dof() {
            return Err(KinematicsError::LengthMismatch { expected: self.dof(), got: seed.len() }.into());
        }
        if !target.is_finite() || !seed.is_finite() {
            return Err(IkError::NonFinite);
        }
        let target = target.canonical();
        let w = params.orientation_weight;

        let mut q = seed.clone();
        let mut best: Option<(f64, JointConfig, [f64; 6], u32)> = None;
        for it in 0..=params.max_iterations {
            let frames = self.chain(&q);
            let e = weighted_error(&target, &frames.ee, w);
            if within_tol(&e, params) {
                return Ok(IkResult { solution: q, converged: true, iterations: it, residual: e });
            }
            let n = norm6(&e);
            if best.as_ref().is_none_or(|b| n < b.0) {
                best = Some((n, q.clone(), e, it));
            }
            if it == params.max_iterations {
                break;
            }
            let jac = frames.jacobian(self.joints());
            let dq = dls_update(&jac, &clamp_task_error(&e, params.max_task_step), params.damping, w);
            let next: Vec<f64> = q
                .values()
                .iter()
                .zip(&dq)
                .map(|(v, d)| v + params.step_scale * d)
                .collect();
            q = self.clamp_to_limits(&JointConfig(next))?;
        }
        let (_, solution, residual, _) = best.expect("at least one iterate");
        Ok(IkResult { solution, converged: false, iterations: params.max_iterations, residual })
    }
}
