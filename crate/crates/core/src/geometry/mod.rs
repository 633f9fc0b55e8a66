//! Two-view epipolar geometry.
//!
//! Cameras follow the pinhole model with a world-to-camera pose
//! `x_cam = R X + t`. Pixel coordinates have their origin at the top-left
//! corner, x to the right and y down, with pixel centers on integer
//! coordinates.
//!
//! Every [`FundamentalMatrix`] is stored in canonical form: unit Frobenius
//! norm, sign chosen so that the entry of largest magnitude is positive.

mod camera;
mod fundamental;

pub use camera::{look_at_rotation, CameraModel, Correspondence, PointKind, ScenePoint};
pub use fundamental::{
    algebraic_error, algebraic_error_raw, compose_essential, compose_fundamental, epipolar_line,
    rank2_project, relative_pose, root_sampson_error, sampson_error, sampson_error_raw,
    singular_ratio, skew, EpipolarLine, EssentialMatrix, FundamentalMatrix, SampsonTerms,
};

use thiserror::Error;

/// Smallest singular value below this fraction of the largest one is
/// conventionally accepted as rank 2.
pub const RANK2_ACCEPTABLE_RATIO: f64 = 1e-3;

/// Whether a σ3/σ1 ratio passes [`RANK2_ACCEPTABLE_RATIO`].
pub fn is_effectively_rank2(ratio: f64) -> bool {
    ratio < RANK2_ACCEPTABLE_RATIO
}

/// Sampson denominators below this are treated as a point at the epipole.
pub const SAMPSON_DENOMINATOR_FLOOR: f64 = 1e-18;

/// Baselines shorter than this leave epipolar geometry undefined.
pub const MIN_BASELINE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate pose: baseline {baseline:e} is below {MIN_BASELINE:e}")]
    DegeneratePose { baseline: f64 },
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("sampson denominator {denominator:e} below floor (point at the epipole)")]
    DegenerateDenominator { denominator: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("non-finite matrix entry")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, GeometryError>;
