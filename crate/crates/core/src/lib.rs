//! Allocation-only core of demoforge: serial-chain kinematics with
//! damped-least-squares IK, the deterministic teleoperation world, the
//! canonical wire/record codec, and episode replay.
//!
//! Everything here is a pure function of its inputs. Trigonometry goes
//! through `libm`, so results are bit-identical across hosts.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod geometry;
pub mod ik;
pub mod kinematics;
pub mod protocol;
pub mod record;
pub mod sim;

pub use geometry::{Aabb, Pose, Quat, Vec3};
pub use ik::{IkError, IkParams, IkResult};
pub use kinematics::{ForwardKinematics, Jacobian, JointConfig, JointKind, JointSpec, ModelError, RobotModel};
pub use protocol::{decode_message, encode_message, Message};
pub use record::ActionEvent;
pub use sim::{Action, SceneSpec, SimFrame, TickRate, World, WorldState};
