//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate point cloud: centered source has rank < 2, rotation is not unique")]
    DegenerateCloud,

    #[error("point behind camera at frame {frame}, joint {joint}")]
    BehindCamera { frame: usize, joint: usize },

    #[error("optimization diverged at iteration {iteration}: objective {objective} exceeds 10x the initial value")]
    Diverged { iteration: usize, objective: f64 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid rig template: {0}")]
    InvalidTemplate(String),

    #[error("degenerate extent: sequence has no spatial spread to normalize by")]
    DegenerateExtent,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("too many joints: {joints} exceeds the maximum of {max}")]
    TooManyJoints { joints: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence too short: {frames} frame(s), need at least {min}")]
    TooShort { frames: usize, min: usize },

    #[error("degenerate frame {frame}: fewer than 3 present joints or rank-deficient cloud")]
    DegenerateFrame { frame: usize },

    #[error("degenerate sequence: not enough present joints for a global alignment")]
    DegenerateSequence,

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
