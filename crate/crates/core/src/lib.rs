//! Single-stage instance segmentation for point clouds by direct box
//! regression, optimal box association and box-conditioned point masks.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: clouds, boxes, hard and soft point-in-box membership
//! - [`association`]: pairing costs and the Hungarian solver
//! - [`losses`]: box, score, mask and semantic losses on plain values
//! - [`network`]: reverse-mode graph, model branches and loss heads
//! - [`training`]: Adam, learning-rate schedule and the training loop
//! - [`checkpoint`]: binary model and optimizer snapshots
//! - [`data`]: synthetic scenes, blocks, featurization and scene files
//! - [`evaluation`]: instance extraction, block merging, AP and mPrec/mRec
//! - [`gradcheck`]: finite-difference verification of the analytic gradients

pub mod association;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
