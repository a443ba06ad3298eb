//! Instance painting for LiDAR point clouds.
//!
//! Projects LiDAR points into surround-camera instance masks, aggregates
//! them into 3D instance priors, refines those priors by salient-cluster
//! detection and emits points augmented with a semantic label and an
//! instance center: `(x, y, z, r, s, cx, cy, cz)`.
//!
//! - [`scene`] - point, label and box types; sweep stacking
//! - [`projection`] - rigid transforms, pinhole cameras, calibration rigs
//! - [`painter`] - mask association, conflict resolution, seam merging
//! - [`refiner`] - DBSCAN, medoids, salient-cluster refinement
//! - [`fusion`] - pillar grids and cascaded channel attention
//! - [`dispatch`] - feature pyramid and scale-aware head assignment
//! - [`fp_augment`] - false-positive mining, database and pasting
//! - [`synth`] - synthetic scenes with exact ground truth
//! - [`io`], [`metrics`], [`config`], [`pipeline`] - files, evaluation and the driver

// `!(a > b)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod projection;
pub mod scene;
pub mod painter;
pub mod refiner;
pub mod fusion;
pub mod dispatch;
pub mod fp_augment;
pub mod io;
pub mod synth;
pub mod metrics;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
