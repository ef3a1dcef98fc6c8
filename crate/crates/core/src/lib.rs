//! Ordinal depth supervision for 3D human pose estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: skeletons, poses, weak-perspective projection, MPJPE and
//!   Procrustes-aligned error.
//! - [`supervision`]: ordinal relations, the pairwise ranking loss and the
//!   weakly supervised keypoint objective.
//! - [`volumetric`]: per-joint score volumes supervised through their 2D and
//!   depth marginals.
//! - [`network`]: small explicit-gradient MLPs and RMSprop.
//! - [`reconstruction`]: the lifting component that turns 2D keypoints and
//!   ordinal-quality depths into metric 3D poses.
//! - [`synth`]: synthetic skeleton poses and a simulated annotator.
//! - [`annotation`]: the adaptive pairwise-question scheduler.
//! - [`trainer`]: toy-scale experiments comparing supervision schemes.
//! - [`gradcheck`]: finite-difference suites for every loss.
//! - [`api`]: payloads of the annotation HTTP API and the item registry.

pub mod annotation;
pub mod api;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod network;
pub mod reconstruction;
pub mod supervision;
pub mod synth;
pub mod trainer;
pub mod volumetric;

pub use error::{Error, Result};
