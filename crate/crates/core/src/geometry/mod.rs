//! Rigid-body geometry shared by every other module.

mod eigen;
mod pose;
pub mod so3;
mod spatial;

pub use eigen::{eigen_symmetric3, SymEig3};
pub use pose::{se3_interpolate, Pose};
pub use spatial::{Neighbor, SpatialIndex};

pub use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("spatial index is empty")]
    EmptyIndex,
}
