//! Continuous-time trajectory: timestamped control poses with piecewise
//! slerp/lerp interpolation and clamped extrapolation.

use thiserror::Error;

use crate::deformation::{DeformationError, DeformationGraph};
use crate::geometry::{se3_interpolate, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("control time {got} does not follow the last control time {last}")]
    NonMonotonicTime { last: f64, got: f64 },
    #[error("control time is not finite")]
    NonFiniteTime,
}

/// A sensor-to-world pose at an absolute time (seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub time: f64,
    pub pose: Pose,
}

impl TimedPose {
    pub fn new(time: f64, pose: Pose) -> Self {
        Self { time, pose }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContinuousTrajectory {
    controls: Vec<TimedPose>,
}

impl ContinuousTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_controls(controls: Vec<TimedPose>) -> Result<Self, TrajectoryError> {
        let mut traj = Self::new();
        for c in controls {
            traj.push(c)?;
        }
        Ok(traj)
    }

    pub fn controls(&self) -> &[TimedPose] {
        &self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn first(&self) -> Option<&TimedPose> {
        self.controls.first()
    }

    pub fn last(&self) -> Option<&TimedPose> {
        self.controls.last()
    }

    /// `(first, last)` control time.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.first()?.time, self.last()?.time))
    }

    /// Appends in place; the time must be strictly later than the last one.
    pub fn push(&mut self, tp: TimedPose) -> Result<(), TrajectoryError> {
        if !tp.time.is_finite() {
            return Err(TrajectoryError::NonFiniteTime);
        }
        if let Some(last) = self.controls.last() {
            if tp.time <= last.time {
                return Err(TrajectoryError::NonMonotonicTime {
                    last: last.time,
                    got: tp.time,
                });
            }
        }
        self.controls.push(tp);
        Ok(())
    }

    pub fn append_control(mut self, tp: TimedPose) -> Result<Self, TrajectoryError> {
        self.push(tp)?;
        Ok(self)
    }

    /// Pose at `t`; clamps to the endpoint poses outside the control range.
    pub fn sample_pose(&self, t: f64) -> Result<Pose, TrajectoryError> {
        let n = self.controls.len();
        if n == 0 {
            return Err(TrajectoryError::EmptyTrajectory);
        }
        let idx = self.controls.partition_point(|c| c.time <= t);
        if idx == 0 {
            return Ok(self.controls[0].pose);
        }
        if idx == n {
            return Ok(self.controls[n - 1].pose);
        }
        let a = &self.controls[idx - 1];
        let b = &self.controls[idx];
        let alpha = (t - a.time) / (b.time - a.time);
        Ok(se3_interpolate(&a.pose, &b.pose, alpha))
    }

    /// Same timestamps, poses replaced by `f`.
    pub fn map_poses(&self, mut f: impl FnMut(&TimedPose) -> Pose) -> Self {
        Self {
            controls: self.controls.iter().map(|c| TimedPose::new(c.time, f(c))).collect(),
        }
    }

    /// Cumulative translational arc length at each control.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.controls.len());
        for (i, c) in self.controls.iter().enumerate() {
            if i > 0 {
                acc += (c.pose.translation - self.controls[i - 1].pose.translation).norm();
            }
            out.push(acc);
        }
        out
    }
}

/// Moves every control through the deformation: translations follow the
/// blended point deformation, rotations are left-multiplied by the
/// orthonormalized blend of the bound node matrices.
pub fn deform_trajectory(
    traj: &ContinuousTrajectory,
    graph: &DeformationGraph,
    time_window: f64,
) -> Result<ContinuousTrajectory, DeformationError> {
    if traj.is_empty() {
        return Err(DeformationError::EmptyTrajectory);
    }
    let mut out = Vec::with_capacity(traj.len());
    for c in traj.controls() {
        let binding = graph.bind_point(&c.pose.translation, c.time, time_window)?;
        let translation = graph.deform_point(&binding, &c.pose.translation);
        let rotation = graph.blended_rotation(&binding) * c.pose.rotation;
        out.push(TimedPose::new(c.time, Pose::new(rotation, translation)));
    }
    Ok(ContinuousTrajectory { controls: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line() -> ContinuousTrajectory {
        ContinuousTrajectory::from_controls(vec![
            TimedPose::new(0.0, Pose::identity()),
            TimedPose::new(2.0, Pose::from_translation(Vector3::new(2.0, 0.0, 0.0))),
        ])
        .unwrap()
    }

    #[test]
    fn empty_trajectory_errors() {
        assert_eq!(
            ContinuousTrajectory::new().sample_pose(0.0),
            Err(TrajectoryError::EmptyTrajectory)
        );
    }

    #[test]
    fn midpoint_and_clamp() {
        let t = line();
        assert_eq!(t.sample_pose(1.0).unwrap().translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.sample_pose(-3.0).unwrap(), Pose::identity());
        assert_eq!(t.sample_pose(9.0).unwrap(), t.controls()[1].pose);
        assert_eq!(t.sample_pose(2.0).unwrap(), t.controls()[1].pose);
    }

    #[test]
    fn append_rules() {
        let t = ContinuousTrajectory::new()
            .append_control(TimedPose::new(5.0, Pose::identity()))
            .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(
            t.append_control(TimedPose::new(5.0, Pose::identity())),
            Err(TrajectoryError::NonMonotonicTime { last: 5.0, got: 5.0 })
        );
        assert_eq!(
            ContinuousTrajectory::new().append_control(TimedPose::new(f64::NAN, Pose::identity())),
            Err(TrajectoryError::NonFiniteTime)
        );
    }

    #[test]
    fn random_appends_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut traj = ContinuousTrajectory::new();
        let mut t = 0.0;
        let mut poses = Vec::new();
        for _ in 0..100 {
            t += rng.random_range(0.01..2.0);
            let p = Pose::from_yaw(
                rng.random_range(-3.0..3.0),
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), 0.0),
            );
            traj = traj.append_control(TimedPose::new(t, p)).unwrap();
            poses.push((t, p));
        }
        for (t, p) in poses {
            assert_eq!(traj.sample_pose(t).unwrap(), p);
        }
    }

    #[test]
    fn sampling_is_continuous_across_controls() {
        let traj = ContinuousTrajectory::from_controls(vec![
            TimedPose::new(0.0, Pose::identity()),
            TimedPose::new(1.0, Pose::from_yaw(0.8, Vector3::new(1.0, 0.5, 0.0))),
            TimedPose::new(1.5, Pose::from_yaw(-0.4, Vector3::new(2.0, 0.0, 1.0))),
        ])
        .unwrap();
        for &tc in &[1.0, 1.5] {
            for eps in [1e-3, 1e-6, 1e-9] {
                let a = traj.sample_pose(tc - eps).unwrap();
                let b = traj.sample_pose(tc + eps).unwrap();
                assert!(a.translation_distance(&b) < 10.0 * eps);
                assert!(a.rotation_angle_to(&b) < 10.0 * eps);
            }
        }
    }
}
