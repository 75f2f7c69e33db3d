//! Synthetic planar worlds, a spinning scanner with per-ray timing, drifted
//! odometry and evaluation against ground truth.

mod path;
mod scanner;
mod world;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::surfel::SurfelMap;
use crate::trajectory::{ContinuousTrajectory, TimedPose};

pub use path::{ground_truth, preset_path, Path, PathParams};
pub use scanner::{simulate_sweeps, simulate_traced, sweep_seed, sweep_windows, RayHit, ScannerSpec};
pub use world::{Patch, Preset, WorldSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("unknown world preset {0:?}")]
    UnknownPreset(String),
    #[error("patch edges are not linearly independent")]
    DegeneratePatch,
    #[error("estimated and ground-truth trajectories do not overlap in time")]
    NoOverlap,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// One step of the drift model: the body-frame motion is scaled by
/// `1 + rate` and yawed by `yaw_rate` radians per meter travelled.
pub fn drift_increment(rel: &Pose, rate: f64, yaw_rate_rad: f64) -> Pose {
    let length = rel.translation.norm();
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rate_rad * length);
    Pose::new(yaw * rel.rotation, rel.translation * (1.0 + rate))
}

/// Re-integrates the trajectory through [`drift_increment`]. The first
/// control is kept; `yaw_rate` is in degrees per meter.
pub fn inject_drift(gt: &ContinuousTrajectory, rate: f64, yaw_rate_deg: f64) -> Result<ContinuousTrajectory, SimError> {
    if !(rate >= 0.0 && yaw_rate_deg >= 0.0 && rate.is_finite() && yaw_rate_deg.is_finite()) {
        return Err(SimError::InvalidParams("drift rates must be finite and >= 0".into()));
    }
    let controls = gt.controls();
    let Some(first) = controls.first() else {
        return Ok(gt.clone());
    };
    if rate == 0.0 && yaw_rate_deg == 0.0 {
        return Ok(gt.clone());
    }
    let yaw_rate = yaw_rate_deg.to_radians();
    let mut out = Vec::with_capacity(controls.len());
    out.push(*first);
    let mut current = first.pose;
    for w in controls.windows(2) {
        let rel = w[0].pose.inverse().compose(&w[1].pose);
        current = current.compose(&drift_increment(&rel, rate, yaw_rate));
        out.push(TimedPose::new(w[1].time, current));
    }
    Ok(ContinuousTrajectory::from_controls(out).expect("times unchanged"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_rmse: f64,
    pub map_rms: f64,
    pub associated_poses: usize,
    pub surfels: usize,
}

/// Translation RMSE of `est` controls against `gt` sampled at the same times
/// (shared world frame, no alignment) and RMS surfel-to-world distance.
pub fn evaluate(
    est: &ContinuousTrajectory,
    gt: &ContinuousTrajectory,
    map: &SurfelMap,
    world: &WorldSpec,
) -> Result<Metrics, SimError> {
    let (Some((e0, e1)), Some((g0, g1))) = (est.time_range(), gt.time_range()) else {
        return Err(SimError::NoOverlap);
    };
    if e1 < g0 || g1 < e0 {
        return Err(SimError::NoOverlap);
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for c in est.controls().iter().filter(|c| c.time >= g0 && c.time <= g1) {
        let truth = gt.sample_pose(c.time).expect("nonempty");
        sq += (c.pose.translation - truth.translation).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Err(SimError::NoOverlap);
    }
    Ok(Metrics {
        ate_rmse: (sq / n as f64).sqrt(),
        map_rms: map_rms(map, world),
        associated_poses: n,
        surfels: map.len(),
    })
}

pub fn map_rms(map: &SurfelMap, world: &WorldSpec) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let d2: Vec<f64> = crate::parallel::map_slice(map.surfels(), |s| world.distance(&s.position).powi(2));
    (d2.iter().sum::<f64>() / d2.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_interpolate;
    use crate::surfel::{extract_surfels, PointSample, SurfelParams};

    fn straight(length: f64, step: f64) -> ContinuousTrajectory {
        let n = (length / step).round() as usize;
        ContinuousTrajectory::from_controls(
            (0..=n)
                .map(|i| {
                    TimedPose::new(
                        i as f64,
                        Pose::from_translation(Vector3::new(i as f64 * step, 0.0, 0.0)),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn static_traj(pose: Pose, duration: f64) -> ContinuousTrajectory {
        ContinuousTrajectory::from_controls(vec![TimedPose::new(0.0, pose), TimedPose::new(duration, pose)]).unwrap()
    }

    fn plane_residual(world: &WorldSpec, w: &Vector3<f64>) -> f64 {
        world
            .patches
            .iter()
            .map(|p| p.normal().dot(&(w - p.corner)).abs())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn static_unit_box_is_exact() {
        let lo = Vector3::new(-0.5, -0.5, -0.5);
        let mut patches = Vec::new();
        for k in 0..3 {
            for side in [0.0, 1.0] {
                let mut c = lo;
                c[k] += side;
                let u = Vector3::ith((k + 1) % 3, 1.0);
                let v = Vector3::ith((k + 2) % 3, 1.0);
                patches.push(Patch::new(c, u, v).unwrap());
            }
        }
        let world = WorldSpec::new(patches).unwrap();
        let pose = Pose::from_yaw(0.3, Vector3::new(0.1, -0.05, 0.02));
        let sweeps = simulate_sweeps(&world, &static_traj(pose, 1.0), &ScannerSpec::default(), 1).unwrap();
        assert_eq!(sweeps.len(), 1);
        assert!(sweeps[0].samples().len() > 3000);
        for s in sweeps[0].samples() {
            let w = pose.transform_point(&s.position);
            assert!(plane_residual(&world, &w) < 1e-12);
        }
    }

    #[test]
    fn moving_scanner_deskews_through_ground_truth() {
        let world = WorldSpec::preset(Preset::CorridorLoop);
        let gt = ground_truth(&preset_path(Preset::CorridorLoop), &PathParams::default()).unwrap();
        let sweeps = simulate_sweeps(&world, &gt, &ScannerSpec::default(), 5).unwrap();
        for sweep in sweeps.iter().step_by(7) {
            for s in sweep.samples() {
                let w = gt.sample_pose(s.time).unwrap().transform_point(&s.position);
                assert!(world.distance(&w) < 1e-9);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let world = WorldSpec::preset(Preset::BoxRoom);
        let gt = ground_truth(&preset_path(Preset::BoxRoom), &PathParams::default()).unwrap();
        let scanner = ScannerSpec {
            noise_sigma: 0.02,
            ..ScannerSpec::default()
        };
        let a = simulate_sweeps(&world, &gt, &scanner, 9).unwrap();
        let b = simulate_sweeps(&world, &gt, &scanner, 9).unwrap();
        let c = simulate_sweeps(&world, &gt, &scanner, 10).unwrap();
        let bits = |s: &[crate::odometry::Sweep]| -> Vec<u64> {
            s.iter()
                .flat_map(|w| {
                    w.samples()
                        .iter()
                        .flat_map(|p| [p.position.x, p.position.y, p.position.z, p.time])
                })
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn empty_trajectory_cannot_be_simulated() {
        assert_eq!(
            simulate_sweeps(
                &WorldSpec::default(),
                &ContinuousTrajectory::new(),
                &ScannerSpec::default(),
                0
            ),
            Err(SimError::EmptyTrajectory)
        );
    }

    #[test]
    fn zero_drift_is_identity() {
        let gt = ground_truth(&preset_path(Preset::CorridorLoop), &PathParams::default()).unwrap();
        assert_eq!(inject_drift(&gt, 0.0, 0.0).unwrap(), gt);
    }

    #[test]
    fn scale_drift_on_a_line() {
        let gt = straight(100.0, 0.5);
        let d = inject_drift(&gt, 0.01, 0.0).unwrap();
        let end = d.last().unwrap().pose.translation;
        assert!((end - Vector3::new(101.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn yaw_drift_on_a_square_matches_closed_form() {
        let side = 5.0;
        let corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side), (0.0, 0.0)];
        let controls: Vec<_> = corners
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                TimedPose::new(
                    i as f64,
                    Pose::from_yaw(std::f64::consts::FRAC_PI_2 * i as f64, Vector3::new(x, y, 0.0)),
                )
            })
            .collect();
        let gt = ContinuousTrajectory::from_controls(controls).unwrap();
        let (rate, yaw_deg) = (0.02, 0.5);
        let d = inject_drift(&gt, rate, yaw_deg).unwrap();
        // segment i is flown with heading error k·side·i
        let k = yaw_deg.to_radians();
        let mut expected = Vector3::zeros();
        for i in 0..4 {
            let heading = std::f64::consts::FRAC_PI_2 * i as f64 + k * side * i as f64;
            expected += Vector3::new(heading.cos(), heading.sin(), 0.0) * side * (1.0 + rate);
        }
        let end = d.last().unwrap().pose.translation;
        assert!((end - expected).norm() < 1e-12);
        let gap = (end - gt.last().unwrap().pose.translation).norm();
        assert!(gap > 0.1);
    }

    #[test]
    fn ate_examples() {
        let gt = straight(10.0, 0.5);
        let map = SurfelMap::new(0.5);
        let world = WorldSpec::default();
        assert_eq!(evaluate(&gt, &gt, &map, &world).unwrap().ate_rmse, 0.0);
        let shifted = gt.map_poses(|c| Pose::new(c.pose.rotation, c.pose.translation + Vector3::new(0.1, 0.0, 0.0)));
        assert!((evaluate(&shifted, &gt, &map, &world).unwrap().ate_rmse - 0.1).abs() < 1e-12);
        let late = ContinuousTrajectory::from_controls(vec![TimedPose::new(100.0, Pose::identity())]).unwrap();
        assert_eq!(evaluate(&late, &gt, &map, &world), Err(SimError::NoOverlap));
    }

    #[test]
    fn ground_truth_map_is_exact() {
        let world = WorldSpec::preset(Preset::BoxRoom);
        let gt = ground_truth(&preset_path(Preset::BoxRoom), &PathParams::default()).unwrap();
        let sweeps = simulate_sweeps(&world, &gt, &ScannerSpec::default(), 3).unwrap();
        let params = SurfelParams {
            planarity_eps: 1e-9,
            ..SurfelParams::default()
        };
        let mut map = SurfelMap::new(params.voxel);
        for sweep in sweeps.iter().take(5) {
            let world_pts: Vec<PointSample> = sweep
                .samples()
                .iter()
                .map(|s| PointSample::new(gt.sample_pose(s.time).unwrap().transform_point(&s.position), s.time))
                .collect();
            let a = gt.sample_pose(sweep.t_begin()).unwrap();
            let b = gt.sample_pose(sweep.t_end()).unwrap();
            let origin = se3_interpolate(&a, &b, 0.5).translation;
            let surfels = extract_surfels(&world_pts, &params, &origin).unwrap();
            map.fuse(&surfels, params.merge_radius, params.max_normal_angle_deg);
        }
        assert!(map.len() > 50);
        assert!(map_rms(&map, &world) < 1e-6);
    }
}
