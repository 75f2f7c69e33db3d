use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;

use super::world::Preset;
use super::SimError;
use crate::geometry::Pose;
use crate::trajectory::{ContinuousTrajectory, TimedPose};

/// Half-length of the chord used to derive headings.
const HEADING_CHORD: f64 = 0.25;

/// Arc-length parameterized planar polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    points: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
    closed: bool,
}

impl Path {
    pub fn polyline(mut points: Vec<Vector3<f64>>, closed: bool) -> Result<Self, SimError> {
        points.dedup();
        if points.len() < 2 {
            return Err(SimError::InvalidParams(
                "a path needs at least two distinct points".into(),
            ));
        }
        if closed && points.first() != points.last() {
            points.push(points[0]);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        Ok(Self {
            points,
            cumulative,
            closed,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length())
        } else {
            s.clamp(0.0, self.length())
        }
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        let s = self.wrap(s);
        let i = self
            .cumulative
            .partition_point(|&c| c <= s)
            .clamp(1, self.points.len() - 1);
        let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i]);
        let a = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.points[i - 1] + (self.points[i] - self.points[i - 1]) * a
    }

    /// Heading of the chord through `s ± HEADING_CHORD`.
    pub fn yaw(&self, s: f64) -> f64 {
        let (lo, hi) = if self.closed {
            (s - HEADING_CHORD, s + HEADING_CHORD)
        } else {
            let lo = (s - HEADING_CHORD).max(0.0);
            let hi = (s + HEADING_CHORD).min(self.length());
            (lo.min(hi - 1e-6), hi.max(lo + 1e-6))
        };
        let d = self.position(hi) - self.position(lo);
        d.y.atan2(d.x)
    }

    pub fn pose(&self, s: f64) -> Pose {
        Pose::from_yaw(self.yaw(s), self.position(s))
    }

    pub fn transformed(&self, frame: &Pose) -> Self {
        let points = self.points.iter().map(|p| frame.transform_point(p)).collect();
        Self {
            points,
            cumulative: self.cumulative.clone(),
            closed: self.closed,
        }
    }
}

fn sample_curve(f: impl Fn(f64) -> Vector3<f64>, from: f64, to: f64, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|i| f(from + (to - from) * i as f64 / n as f64)).collect()
}

fn arc(center: Vector3<f64>, r: f64, from: f64, to: f64, n: usize) -> Vec<Vector3<f64>> {
    sample_curve(|a| center + Vector3::new(a.cos(), a.sin(), 0.0) * r, from, to, n)
}

/// Path of a preset before it is moved to start at the identity pose.
fn design_path(preset: Preset) -> Path {
    let v = Vector3::new;
    let points = match preset {
        Preset::BoxRoom => {
            let r = 1.5;
            sample_curve(|a| v(r * a.sin(), r - r * a.cos(), 0.0), 0.0, 2.0 * PI, 2000)
        }
        Preset::CorridorLoop => {
            let n = 400;
            let mut p = vec![v(2.5, 0.0, 0.0)];
            p.extend(arc(v(5.0, 1.0, 0.0), 1.0, -FRAC_PI_2, 0.0, n));
            p.extend(arc(v(5.0, 3.0, 0.0), 1.0, 0.0, FRAC_PI_2, n));
            p.extend(arc(v(0.0, 3.0, 0.0), 1.0, FRAC_PI_2, PI, n));
            p.extend(arc(v(0.0, 1.0, 0.0), 1.0, PI, 1.5 * PI, n));
            p
        }
        Preset::FigureEight => {
            let a = 10.0;
            sample_curve(
                |s| v(a * s.sin(), a * s.sin() * s.cos(), 0.0),
                FRAC_PI_2,
                FRAC_PI_2 + 2.0 * PI,
                20000,
            )
        }
    };
    Path::polyline(points, true).expect("preset paths are valid")
}

/// Rigid transform taking a preset's design frame to the frame in which its
/// path starts at the identity pose.
pub(crate) fn preset_frame(preset: Preset) -> Pose {
    design_path(preset).pose(0.0).inverse()
}

/// The closed path of a preset, starting at the identity pose.
pub fn preset_path(preset: Preset) -> Path {
    design_path(preset).transformed(&preset_frame(preset))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathParams {
    pub speed: f64,
    pub extra_distance: f64,
    pub control_dt: f64,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            speed: 0.5,
            extra_distance: 4.0,
            control_dt: 0.05,
        }
    }
}

/// Constant-speed ground truth along `path`, once around (plus
/// `extra_distance` of overlap) for closed paths, end to end otherwise.
pub fn ground_truth(path: &Path, params: &PathParams) -> Result<ContinuousTrajectory, SimError> {
    if !(params.speed > 0.0 && params.control_dt > 0.0 && params.extra_distance >= 0.0) {
        return Err(SimError::InvalidParams(
            "speed and control_dt must be > 0, extra_distance >= 0".into(),
        ));
    }
    let distance = if path.is_closed() {
        path.length() + params.extra_distance
    } else {
        path.length()
    };
    let duration = distance / params.speed;
    let steps = (duration / params.control_dt + 1e-9).floor() as usize;
    let controls = (0..=steps)
        .map(|i| {
            let t = i as f64 * params.control_dt;
            TimedPose::new(t, path.pose(params.speed * t))
        })
        .collect();
    Ok(ContinuousTrajectory::from_controls(controls).expect("times increase"))
}
