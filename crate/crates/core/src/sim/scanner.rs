use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SimError, WorldSpec};
use crate::odometry::Sweep;
use crate::parallel;
use crate::surfel::PointSample;
use crate::trajectory::ContinuousTrajectory;

/// Spinning multi-beam scanner: rays advance in azimuth over the sweep while
/// cycling through a fixed fan of elevations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScannerSpec {
    pub rays: usize,
    pub duration: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub beams: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for ScannerSpec {
    fn default() -> Self {
        Self {
            rays: 3200,
            duration: 1.0,
            max_range: 10.0,
            noise_sigma: 0.0,
            beams: 16,
            min_elevation_deg: -30.0,
            max_elevation_deg: 30.0,
        }
    }
}

impl ScannerSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.into()));
        if self.rays == 0 || self.beams == 0 {
            return bad("rays and beams must be >= 1");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be > 0");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be > 0");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.min_elevation_deg <= self.max_elevation_deg
            && self.min_elevation_deg >= -90.0
            && self.max_elevation_deg <= 90.0)
        {
            return bad("elevations must satisfy -90 <= min <= max <= 90");
        }
        Ok(())
    }

    /// Unit direction of ray `i` in the sensor frame.
    pub fn direction(&self, i: usize) -> Vector3<f64> {
        let azimuth = 2.0 * std::f64::consts::PI * i as f64 / self.rays as f64;
        let beam = i % self.beams;
        let elevation = if self.beams == 1 {
            0.5 * (self.min_elevation_deg + self.max_elevation_deg)
        } else {
            self.min_elevation_deg
                + (self.max_elevation_deg - self.min_elevation_deg) * beam as f64 / (self.beams - 1) as f64
        }
        .to_radians();
        Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        )
    }

    /// Firing time offset of ray `i` from the sweep start.
    pub fn offset(&self, i: usize) -> f64 {
        self.duration * i as f64 / self.rays as f64
    }
}

pub fn sweep_seed(seed: u64, sweep_index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(sweep_index)
}

/// One world-frame hit with the ray it came from, before noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub sample: PointSample,
    pub world: Vector3<f64>,
    pub patch: usize,
}

fn simulate_one(
    world: &WorldSpec,
    gt: &ContinuousTrajectory,
    scanner: &ScannerSpec,
    t_begin: f64,
    seed: u64,
) -> Vec<RayHit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (scanner.noise_sigma > 0.0).then(|| Normal::new(0.0, scanner.noise_sigma).expect("sigma >= 0"));
    let mut out = Vec::with_capacity(scanner.rays);
    for i in 0..scanner.rays {
        let t = t_begin + scanner.offset(i);
        let pose = gt.sample_pose(t).expect("trajectory is nonempty");
        let d = scanner.direction(i);
        let world_dir = pose.rotate(&d);
        let Some((range, patch)) = world.raycast(&pose.translation, &world_dir, scanner.max_range) else {
            continue;
        };
        let measured = match &noise {
            Some(n) => range + n.sample(&mut rng),
            None => range,
        };
        out.push(RayHit {
            sample: PointSample::new(d * measured, t),
            world: pose.translation + world_dir * range,
            patch,
        });
    }
    out
}

/// Sweep windows `[t0 + k·d, t0 + (k+1)·d]` fitting inside the trajectory.
pub fn sweep_windows(gt: &ContinuousTrajectory, duration: f64) -> Vec<(f64, f64)> {
    let Some((t0, t1)) = gt.time_range() else {
        return Vec::new();
    };
    let n = ((t1 - t0) / duration + 1e-9).floor() as usize;
    (0..n)
        .map(|k| (t0 + k as f64 * duration, t0 + (k + 1) as f64 * duration))
        .collect()
}

/// Like [`simulate_sweeps`], also returning the noise-free world point of
/// every sample.
pub fn simulate_traced(
    world: &WorldSpec,
    gt: &ContinuousTrajectory,
    scanner: &ScannerSpec,
    seed: u64,
) -> Result<Vec<(Sweep, Vec<RayHit>)>, SimError> {
    if gt.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    scanner.validate()?;
    let windows = sweep_windows(gt, scanner.duration);
    if windows.is_empty() {
        return Err(SimError::InvalidParams("trajectory shorter than one sweep".into()));
    }
    let sweeps = parallel::map_slice(&windows.iter().enumerate().collect::<Vec<_>>(), |(k, (t0, t1))| {
        let hits = simulate_one(world, gt, scanner, *t0, sweep_seed(seed, *k as u64));
        let samples = hits.iter().map(|h| h.sample).collect();
        let sweep = Sweep::new(samples, *t0, *t1).expect("ray times lie inside the window");
        (sweep, hits)
    });
    Ok(sweeps)
}

/// Casts every ray of every sweep from the ground-truth pose at its firing
/// time and returns sensor-frame samples.
pub fn simulate_sweeps(
    world: &WorldSpec,
    gt: &ContinuousTrajectory,
    scanner: &ScannerSpec,
    seed: u64,
) -> Result<Vec<Sweep>, SimError> {
    Ok(simulate_traced(world, gt, scanner, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}
