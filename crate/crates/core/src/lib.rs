//! Monocular visual SLAM on tracked edge points.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] reads TUM-style sequences and writes trajectories / point clouds.
//! * [`edges`] detects single-pixel edge chains (DoG, thinning, linking) and rejects blurred frames.
//! * [`flow`] tracks edge points with bidirectional pyramidal Lucas-Kanade and filters them.
//! * [`geometry`] holds the multi-view kernels (five-point, triangulation, EPnP, Horn).
//! * [`ba`] is a sparse Levenberg-Marquardt bundle adjuster with a Schur-complement solve.
//! * [`pipeline`] is the keyframe state machine: selection, validated two-view
//!   initialization, incremental mapping and track-loss recovery.
//! * [`loop_closure`] detects loops from moment invariants and quadrant statistics and merges them.
//! * [`eval`] and [`run`] compute ATE against ground truth and drive whole sequences.
//! * [`synthetic`] generates wireframe scenes, projected tracks and rendered sequences for testing.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ba;
pub mod config;
pub mod dataset;
pub mod edges;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frontend;
pub mod geometry;
pub mod image;
pub mod loop_closure;
pub mod map;
pub mod pipeline;
pub mod run;
pub mod synthetic;

pub use config::Config;
pub use dataset::{CameraIntrinsics, ImageFrame, TrajectoryRecord};
pub use error::{Error, Result};
pub use geometry::{Pose, RelativePose, Similarity};
pub use map::SlamMap;
pub use pipeline::Pipeline;

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
