//! Category-agnostic spatio-temporal 2D-to-3D skeleton lifting.
//!
//! The crate covers the full desk-scale pipeline: synthetic 4D skeleton
//! construction (procedural rigs, virtual markers, bone-length-preserving IK
//! refinement, perspective projection), a windowed-attention lifting network
//! trained with a Procrustes-aligned loss, and frame/sequence-aligned error
//! metrics with their evaluation harnesses.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
