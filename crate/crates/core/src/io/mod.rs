//! PLY point clouds and surfel maps, TUM trajectories.

mod ply;
mod tum;

use thiserror::Error;

pub use ply::{
    parse_vertices, read_points, read_surfel_map, read_table, write_points, write_surfel_map, write_table, PlyFormat,
    PlyTable,
};
pub use tum::{format_tum_line, parse_tum, read_trajectory_tum, write_trajectory_tum};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file at {location}: {message}")]
    Malformed { location: String, message: String },
    #[error("missing property {0:?}")]
    MissingProperty(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
}

impl IoError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn malformed(location: impl Into<String>, message: impl Into<String>) -> Self {
        IoError::Malformed {
            location: location.into(),
            message: message.into(),
        }
    }
}
