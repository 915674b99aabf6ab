//! Vision-guided pick-and-place without hardware.
//!
//! The crate covers the whole chain from a calibrated depth camera to a
//! pick-and-place plan:
//!
//! - [`calib`]: planar intrinsic calibration, stereo extrinsics and the
//!   depth-deviation check,
//! - [`handeye`]: eye-to-hand calibration of the fixed camera against the robot base,
//! - [`cloud`]: point clouds, cropping, k-d tree search, normals, PLY files,
//! - [`register`]: rigid alignment (closed-form fit, PCA coarse alignment, ICP),
//! - [`graspdb`]: taught (cloud, grasp) pairs per object face and grasp transfer,
//! - [`pipeline`]: the synthetic scene simulator, waypoint planner and the
//!   end-to-end run.
//!
//! Every pose follows the convention documented in [`geom3`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cloud;
pub mod geom3;
pub mod graspdb;
pub mod handeye;
pub mod pipeline;
pub mod register;
pub mod sampling;

pub use geom3::{FrameId, Pose, Vec3};
