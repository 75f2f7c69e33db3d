//! Embedded deformation graph sampled along the trajectory.
//!
//! Each node carries a free linear map `A` and a translation `t`; a point
//! bound to nodes `j` with weights `w_j` moves to
//! `Σ_j w_j [A_j (v − g_j) + g_j + t_j]`. The graph is optimized against loop
//! constraints under rotation and regularization energies and then applied to
//! the surfel map and the trajectory together.

mod apply;
mod energy;
mod graph;
mod json;
mod solver;
pub mod sparse;

use thiserror::Error;

pub use apply::apply_deformation;
pub use energy::{
    energy, stacked_jacobian, stacked_residuals, BoundConstraint, ConstraintKind, ConstraintSet, EnergyBreakdown,
    LoopConstraint, Term,
};
pub use graph::{build_graph, Binding, DeformationGraph, DeformationNode, EnergyWeights, PARAMS_PER_NODE};
pub use json::{DeformationProblem, GraphJson};
pub use solver::{optimize_graph, IterationLog, SolverParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformationError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("deformation graph has no nodes")]
    EmptyGraph,
    #[error("node {node} has a singular linear map (det {det:e})")]
    SingularNode { node: usize, det: f64 },
    #[error("no constraints to optimize")]
    NoConstraints,
    #[error("normal equations could not be factored (damping {damping:e})")]
    NumericalFailure { damping: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("malformed graph or constraint data: {0}")]
    Malformed(String),
}
