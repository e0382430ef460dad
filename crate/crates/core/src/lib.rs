//! Motion-transfer driven intra-class augmentation for finger-vein images.
//!
//! The pipeline: a self-supervised keypoint detector ([`posedet`]), a dense
//! motion network turning keypoint displacements into a flow field
//! ([`densemotion`]), a warping encoder/decoder ([`imggen`]), their joint
//! training ([`mttrain`]), PCA motion sampling for online augmentation
//! ([`mtaug`]), a procedural vein dataset ([`veinsim`]) and a verification
//! harness ([`fvreval`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod densemotion;
pub mod diffcore;
mod error;
pub mod fvreval;
pub mod grid;
pub mod imggen;
pub mod model;
pub mod mtaug;
pub mod mttrain;
pub mod posedet;
pub mod veinsim;

pub use diffcore::Array;
pub use error::{Error, Result};
