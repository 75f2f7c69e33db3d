//! Dense surfel-map LiDAR SLAM with a continuous-time trajectory and elastic
//! loop closure.
//!
//! The map is a set of oriented disks (surfels) fused from timestamped LiDAR
//! sweeps. Each sweep is registered against the recently active part of the
//! map with a two-pose continuous-time point-to-plane ICP. When the sensor
//! revisits a place, the loop is verified by submap registration and closed by
//! optimizing an embedded deformation graph sampled along the trajectory; the
//! optimized deformation is then applied to both the surfels and the
//! trajectory, so the map is corrected in place instead of being rebuilt from
//! raw scans.
//!
//! Module map:
//!
//! - [`geometry`]: poses, interpolation, 3x3 symmetric eigen-decomposition,
//!   nearest-neighbour index.
//! - [`trajectory`]: the continuous-time trajectory.
//! - [`surfel`]: surfel extraction, fusion and queries.
//! - [`odometry`]: continuous-time sweep registration.
//! - [`deformation`]: the deformation graph, its energy and solver.
//! - [`loop_closure`]: revisit detection, verification and constraints.
//! - [`sim`]: synthetic worlds, scanner model, drift and metrics.
//! - [`io`], [`config`], [`pipeline`]: file formats, configuration and the
//!   end-to-end driver used by the CLI.

pub mod config;
pub mod deformation;
pub mod geometry;
pub mod io;
pub mod loop_closure;
pub mod odometry;
pub mod parallel;
pub mod pipeline;
pub mod sim;
pub mod surfel;
pub mod trajectory;

pub use geometry::{se3_interpolate, Pose};
pub use surfel::{PointSample, Surfel, SurfelMap};
pub use trajectory::{ContinuousTrajectory, TimedPose};
