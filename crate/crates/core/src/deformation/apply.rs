use super::graph::DeformationGraph;
use super::DeformationError;
use crate::parallel;
use crate::surfel::{Surfel, SurfelMap};
use crate::trajectory::{deform_trajectory, ContinuousTrajectory};

/// Deforms every surfel (bound by its creation time) and the trajectory
/// through the same graph. Radius, confidence and time are kept.
pub fn apply_deformation(
    map: &SurfelMap,
    traj: &ContinuousTrajectory,
    graph: &DeformationGraph,
    time_window: f64,
) -> Result<(SurfelMap, ContinuousTrajectory), DeformationError> {
    let moved = parallel::map_slice(map.surfels(), |s| -> Result<Surfel, DeformationError> {
        let binding = graph.bind_point(&s.position, s.time, time_window)?;
        Ok(Surfel {
            position: graph.deform_point(&binding, &s.position),
            normal: graph.deform_normal(&binding, &s.normal)?,
            ..*s
        })
    });
    let surfels = moved.into_iter().collect::<Result<Vec<_>, _>>()?;
    let traj = deform_trajectory(traj, graph, time_window)?;
    Ok((SurfelMap::from_surfels(surfels, map.voxel()), traj))
}
