//! Question-conditioned multimodal fusion for driving-scene question answering.
//!
//! * [`numerics`]: matrix kernels, reverse-mode tape, finite-difference checks
//! * [`pointcloud`]: kd-tree neighborhoods, covariance normals, `[p; n]` rows
//! * [`tmm`]: question-pooled gating over LiDAR / occupancy / description streams
//! * [`cma`]: learnable abstract tokens that read the question, then the scene
//! * [`scene_desc`]: per-view then scene-level description orchestration
//! * [`pipeline`]: feature files, run configuration, toy training and ablations

pub mod error;
pub mod numerics;
pub mod pointcloud;
pub mod tmm;
pub mod cma;
pub mod scene_desc;
pub mod pipeline;

pub use error::{Error, Result};
