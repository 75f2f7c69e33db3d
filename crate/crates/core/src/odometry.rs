//! Continuous-time sweep registration.
//!
//! A sweep is placed by interpolating between its two bracketing control
//! poses: a sample at time `t` uses `se3_interpolate(a, b, α)` with
//! `α = (t − t_begin) / (t_end − t_begin)`. Both poses are refined jointly by
//! Gauss–Newton on Huber-weighted point-to-plane residuals against the surfel
//! map. The same engine, with a single rigid pose, aligns submaps during loop
//! verification.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::geometry::so3;
use crate::geometry::{se3_interpolate, Pose};
use crate::parallel;
use crate::surfel::{PointSample, Surfel, SurfelMap};
use crate::trajectory::TimedPose;

/// Surfels considered (by centre distance) when choosing a correspondence.
const CORRESPONDENCE_CANDIDATES: usize = 8;
const MAX_HALVINGS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("surfel map is empty")]
    EmptyMap,
    #[error("only {found} correspondences, need {required}")]
    NoCorrespondences { found: usize, required: usize },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("initial pose times do not match the sweep bounds")]
    BoundsMismatch,
}

/// One LiDAR sweep in the sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    samples: Vec<PointSample>,
    t_begin: f64,
    t_end: f64,
}

impl Sweep {
    pub fn new(samples: Vec<PointSample>, t_begin: f64, t_end: f64) -> Result<Self, OdometryError> {
        if !(t_begin < t_end) {
            return Err(OdometryError::InvalidSweep(format!(
                "t_begin {t_begin} must precede t_end {t_end}"
            )));
        }
        if let Some(s) = samples.iter().find(|s| !(s.time >= t_begin && s.time <= t_end)) {
            return Err(OdometryError::InvalidSweep(format!(
                "sample time {} outside [{t_begin}, {t_end}]",
                s.time
            )));
        }
        if samples.iter().any(|s| !s.position.iter().all(|v| v.is_finite())) {
            return Err(OdometryError::InvalidSweep("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            t_begin,
            t_end,
        })
    }

    pub fn samples(&self) -> &[PointSample] {
        &self.samples
    }

    pub fn t_begin(&self) -> f64 {
        self.t_begin
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn alpha(&self, t: f64) -> f64 {
        ((t - self.t_begin) / (self.t_end - self.t_begin)).clamp(0.0, 1.0)
    }

    /// World-frame points placed through the segment `a → b`.
    pub fn deskew(&self, a: &Pose, b: &Pose) -> Vec<PointSample> {
        self.samples
            .iter()
            .map(|s| {
                let pose = se3_interpolate(a, b, self.alpha(s.time));
                PointSample::new(pose.transform_point(&s.position), s.time)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationParams {
    pub max_corr_dist: f64,
    pub huber_delta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub min_matches: usize,
    /// Weight of a quadratic pull toward the initial control poses (per
    /// meter and radian); 0 disables it. Only sweep registration uses it.
    pub prior_weight: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_corr_dist: 1.0,
            huber_delta: 0.1,
            tol: 1e-6,
            max_iters: 30,
            min_matches: 10,
            prior_weight: 0.0,
        }
    }
}

/// Huber objective before and after the accepted step of one iteration,
/// both evaluated with that iteration's correspondences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub matches: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub step_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub begin: TimedPose,
    pub end: TimedPose,
    pub iterations: usize,
    pub rms: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidResult {
    /// World-frame transform applied to the input points.
    pub pose: Pose,
    pub iterations: usize,
    pub rms: f64,
    pub matches: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// Signed distance of the placed point from the surfel's tangent plane.
pub fn point_to_plane_residual(p: &PointSample, pose_at_time: &Pose, s: &Surfel) -> f64 {
    s.normal.dot(&(pose_at_time.transform_point(&p.position) - s.position))
}

/// Best surfel for a world point: among the nearest centres, the one whose
/// disk is closest, if that distance is within `max_dist`.
pub fn find_correspondence(map: &SurfelMap, p: &Vector3<f64>, max_dist: f64) -> Option<usize> {
    let hits = map.index().knn(p, CORRESPONDENCE_CANDIDATES).ok()?;
    let mut best: Option<(f64, usize)> = None;
    for h in hits {
        let d = map.surfels()[h.id].disk_distance(p);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, h.id));
        }
    }
    best.filter(|(d, _)| *d <= max_dist).map(|(_, id)| id)
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// A parametric placement of input points with an `N`-dimensional local
/// perturbation.
trait Placement<const N: usize>: Sized + Sync {
    fn count(&self) -> usize;
    fn place(&self, i: usize) -> Vector3<f64>;
    fn jacobian(&self, i: usize) -> SMatrix<f64, 3, N>;
    fn perturb(&self, delta: &SVector<f64, N>) -> Self;

    /// Residual and Jacobian of the deviation from the initial state, if the
    /// placement carries one.
    fn prior(&self) -> Option<(SVector<f64, N>, SMatrix<f64, N, N>)> {
        None
    }
}

/// Two-pose continuous-time placement of a sweep.
struct CtPlacement<'a> {
    sweep: &'a Sweep,
    a: Pose,
    b: Pose,
    anchor: Option<(Pose, Pose)>,
    psi: Vector3<f64>,
    jr_inv: Matrix3<f64>,
    jl_inv: Matrix3<f64>,
}

impl<'a> CtPlacement<'a> {
    fn new(sweep: &'a Sweep, a: Pose, b: Pose) -> Self {
        let psi = so3::log(&(b.rotation * a.rotation.inverse()));
        Self {
            sweep,
            a,
            b,
            anchor: None,
            psi,
            jr_inv: so3::right_jacobian_inv(&psi),
            jl_inv: so3::left_jacobian_inv(&psi),
        }
    }

    fn pose_at(&self, alpha: f64) -> Pose {
        se3_interpolate(&self.a, &self.b, alpha)
    }
}

impl Placement<12> for CtPlacement<'_> {
    fn count(&self) -> usize {
        self.sweep.samples.len()
    }

    fn place(&self, i: usize) -> Vector3<f64> {
        let s = &self.sweep.samples[i];
        self.pose_at(self.sweep.alpha(s.time)).transform_point(&s.position)
    }

    /// Left perturbations `R ← exp(ω)R`, `t ← t + v` on both poses, ordered
    /// `[ω_a, v_a, ω_b, v_b]`.
    fn jacobian(&self, i: usize) -> SMatrix<f64, 3, 12> {
        let s = &self.sweep.samples[i];
        let alpha = self.sweep.alpha(s.time);
        let pose = self.pose_at(alpha);
        let scaled = self.psi * alpha;
        let rot_alpha = so3::exp(&scaled).to_rotation_matrix().into_inner();
        let jl_alpha = so3::left_jacobian(&scaled) * alpha;
        let m_a = rot_alpha - jl_alpha * self.jr_inv;
        let m_b = jl_alpha * self.jl_inv;
        let cross = -so3::hat(&(pose.rotation * s.position));
        let mut j = SMatrix::<f64, 3, 12>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(cross * m_a));
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(Matrix3::identity() * (1.0 - alpha)));
        j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(cross * m_b));
        j.fixed_view_mut::<3, 3>(0, 9).copy_from(&(Matrix3::identity() * alpha));
        j
    }

    fn perturb(&self, d: &SVector<f64, 12>) -> Self {
        let a = perturb_pose(
            &self.a,
            &d.fixed_rows::<3>(0).into_owned(),
            &d.fixed_rows::<3>(3).into_owned(),
        );
        let b = perturb_pose(
            &self.b,
            &d.fixed_rows::<3>(6).into_owned(),
            &d.fixed_rows::<3>(9).into_owned(),
        );
        CtPlacement {
            anchor: self.anchor,
            ..CtPlacement::new(self.sweep, a, b)
        }
    }

    fn prior(&self) -> Option<(SVector<f64, 12>, SMatrix<f64, 12, 12>)> {
        let (a0, b0) = self.anchor?;
        let mut r = SVector::<f64, 12>::zeros();
        let mut j = SMatrix::<f64, 12, 12>::zeros();
        for (k, (p, p0)) in [(&self.a, &a0), (&self.b, &b0)].into_iter().enumerate() {
            let phi = so3::log(&(p.rotation * p0.rotation.inverse()));
            r.fixed_rows_mut::<3>(6 * k).copy_from(&phi);
            r.fixed_rows_mut::<3>(6 * k + 3)
                .copy_from(&(p.translation - p0.translation));
            j.fixed_view_mut::<3, 3>(6 * k, 6 * k)
                .copy_from(&so3::left_jacobian_inv(&phi));
            j.fixed_view_mut::<3, 3>(6 * k + 3, 6 * k + 3)
                .copy_from(&Matrix3::identity());
        }
        Some((r, j))
    }
}

fn perturb_pose(p: &Pose, omega: &Vector3<f64>, v: &Vector3<f64>) -> Pose {
    Pose::new(so3::exp(omega) * p.rotation, p.translation + v)
}

/// Rigid placement `p ↦ R (p − c) + c + t` about a pivot `c`.
struct RigidPlacement<'a> {
    points: &'a [Vector3<f64>],
    pivot: Vector3<f64>,
    pose: Pose,
}

impl RigidPlacement<'_> {
    fn world_pose(&self) -> Pose {
        Pose::new(
            self.pose.rotation,
            self.pivot + self.pose.translation - self.pose.rotation * self.pivot,
        )
    }
}

impl Placement<6> for RigidPlacement<'_> {
    fn count(&self) -> usize {
        self.points.len()
    }

    fn place(&self, i: usize) -> Vector3<f64> {
        self.pose.rotation * (self.points[i] - self.pivot) + self.pivot + self.pose.translation
    }

    fn jacobian(&self, i: usize) -> SMatrix<f64, 3, 6> {
        let cross = -so3::hat(&(self.pose.rotation * (self.points[i] - self.pivot)));
        let mut j = SMatrix::<f64, 3, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&cross);
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        j
    }

    fn perturb(&self, d: &SVector<f64, 6>) -> Self {
        RigidPlacement {
            points: self.points,
            pivot: self.pivot,
            pose: perturb_pose(
                &self.pose,
                &d.fixed_rows::<3>(0).into_owned(),
                &d.fixed_rows::<3>(3).into_owned(),
            ),
        }
    }
}

struct Outcome<P> {
    placement: P,
    iterations: usize,
    converged: bool,
    log: Vec<IterationRecord>,
}

fn correspondences<P: Placement<N>, const N: usize>(
    map: &SurfelMap,
    placement: &P,
    max_dist: f64,
) -> Vec<(usize, usize)> {
    parallel::map_range(placement.count(), |i| {
        find_correspondence(map, &placement.place(i), max_dist).map(|s| (i, s))
    })
    .into_iter()
    .flatten()
    .collect()
}

fn objective<P: Placement<N>, const N: usize>(
    map: &SurfelMap,
    placement: &P,
    corr: &[(usize, usize)],
    delta: f64,
    prior_weight: f64,
) -> f64 {
    let data: f64 = parallel::map_slice(corr, |&(i, s)| {
        let surfel = &map.surfels()[s];
        huber(surfel.normal.dot(&(placement.place(i) - surfel.position)), delta)
    })
    .into_iter()
    .sum();
    data + prior_energy(placement, prior_weight)
}

fn prior_energy<P: Placement<N>, const N: usize>(placement: &P, weight: f64) -> f64 {
    match placement.prior() {
        Some((r, _)) if weight > 0.0 => 0.5 * weight * r.norm_squared(),
        _ => 0.0,
    }
}

fn gauss_newton<P: Placement<N>, const N: usize>(
    map: &SurfelMap,
    mut placement: P,
    params: &RegistrationParams,
) -> Result<Outcome<P>, OdometryError> {
    let mut log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        let corr = correspondences(map, &placement, params.max_corr_dist);
        if corr.len() < params.min_matches {
            return Err(OdometryError::NoCorrespondences {
                found: corr.len(),
                required: params.min_matches,
            });
        }
        iterations += 1;
        let terms = parallel::map_slice(&corr, |&(i, s)| {
            let surfel = &map.surfels()[s];
            let r = surfel.normal.dot(&(placement.place(i) - surfel.position));
            let row = surfel.normal.transpose() * placement.jacobian(i);
            (r, row)
        });
        let mut h = SMatrix::<f64, N, N>::zeros();
        let mut g = SVector::<f64, N>::zeros();
        let mut before = 0.0;
        for (r, row) in &terms {
            let w = huber_weight(*r, params.huber_delta);
            h += row.transpose() * row * w;
            g += row.transpose() * (w * r);
            before += huber(*r, params.huber_delta);
        }
        if params.prior_weight > 0.0 {
            if let Some((r, j)) = placement.prior() {
                h += j.transpose() * j * params.prior_weight;
                g += j.transpose() * r * params.prior_weight;
                before += 0.5 * params.prior_weight * r.norm_squared();
            }
        }
        let Some(step) = solve_damped(&h, &g) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = placement.perturb(&(step * scale));
            let after = objective(map, &trial, &corr, params.huber_delta, params.prior_weight);
            if after <= before {
                accepted = Some((trial, after));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, after)) = accepted else {
            // no descent along the Gauss–Newton direction
            converged = true;
            log.push(IterationRecord {
                matches: corr.len(),
                objective_before: before,
                objective_after: before,
                step_norm: 0.0,
            });
            break;
        };
        let step_norm = step.norm() * scale;
        log.push(IterationRecord {
            matches: corr.len(),
            objective_before: before,
            objective_after: after,
            step_norm,
        });
        placement = trial;
        if step_norm < params.tol {
            converged = true;
            break;
        }
    }
    Ok(Outcome {
        placement,
        iterations,
        converged,
        log,
    })
}

/// Solves `(H + μI) x = −g` with a tiny relative `μ` for rank-deficient
/// geometry.
fn solve_damped<const N: usize>(h: &SMatrix<f64, N, N>, g: &SVector<f64, N>) -> Option<SVector<f64, N>> {
    let mut mu = 1e-9 * (h.trace() / N as f64).max(1e-12);
    for _ in 0..8 {
        let damped = h + SMatrix::<f64, N, N>::identity() * mu;
        if let Some(chol) = damped.cholesky() {
            let x = chol.solve(&(-g));
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        mu *= 100.0;
    }
    None
}

fn residual_stats<P: Placement<N>, const N: usize>(
    map: &SurfelMap,
    placement: &P,
    params: &RegistrationParams,
) -> (f64, usize, usize) {
    let corr = correspondences(map, placement, params.max_corr_dist);
    let residuals: Vec<f64> = corr
        .iter()
        .map(|&(i, s)| {
            let surfel = &map.surfels()[s];
            surfel.normal.dot(&(placement.place(i) - surfel.position))
        })
        .collect();
    let rms = if residuals.is_empty() {
        0.0
    } else {
        (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
    };
    let inliers = residuals.iter().filter(|r| r.abs() <= params.huber_delta).count();
    (rms, corr.len(), inliers)
}

/// Refines the sweep's bracketing control poses against `map`.
pub fn register_sweep(
    map: &SurfelMap,
    sweep: &Sweep,
    init_a: &TimedPose,
    init_b: &TimedPose,
    params: &RegistrationParams,
) -> Result<RegistrationResult, OdometryError> {
    if map.is_empty() {
        return Err(OdometryError::EmptyMap);
    }
    let tol = 1e-9 * (1.0 + sweep.t_end.abs());
    if (init_a.time - sweep.t_begin).abs() > tol || (init_b.time - sweep.t_end).abs() > tol {
        return Err(OdometryError::BoundsMismatch);
    }
    let placement = CtPlacement {
        anchor: Some((init_a.pose, init_b.pose)),
        ..CtPlacement::new(sweep, init_a.pose, init_b.pose)
    };
    let outcome = gauss_newton(map, placement, params)?;
    let (rms, _, inliers) = residual_stats(map, &outcome.placement, params);
    let n = sweep.samples.len().max(1);
    Ok(RegistrationResult {
        begin: TimedPose::new(sweep.t_begin, outcome.placement.a),
        end: TimedPose::new(sweep.t_end, outcome.placement.b),
        iterations: outcome.iterations,
        rms,
        inlier_fraction: inliers as f64 / n as f64,
        converged: outcome.converged,
        log: outcome.log,
    })
}

/// Rigidly aligns world `points` onto `map`, starting from `init` expressed
/// about `pivot`. The result is the world-frame transform of the points.
pub fn register_rigid(
    map: &SurfelMap,
    points: &[Vector3<f64>],
    pivot: &Vector3<f64>,
    init: &Pose,
    params: &RegistrationParams,
) -> Result<RigidResult, OdometryError> {
    if map.is_empty() {
        return Err(OdometryError::EmptyMap);
    }
    let placement = RigidPlacement {
        points,
        pivot: *pivot,
        pose: *init,
    };
    let outcome = gauss_newton(map, placement, params)?;
    let (rms, matches, _) = residual_stats(map, &outcome.placement, params);
    Ok(RigidResult {
        pose: outcome.placement.world_pose(),
        iterations: outcome.iterations,
        rms,
        matches,
        converged: outcome.converged,
        log: outcome.log,
    })
}

/// Stacked point-to-plane residuals and their analytic Jacobian for fixed
/// `(sample, surfel)` pairs. Columns follow `[ω_a, v_a, ω_b, v_b]` with left
/// perturbations.
pub fn ct_residuals_and_jacobian(
    map: &SurfelMap,
    sweep: &Sweep,
    a: &Pose,
    b: &Pose,
    pairs: &[(usize, usize)],
) -> (Vec<f64>, Vec<[f64; 12]>) {
    let placement = CtPlacement::new(sweep, *a, *b);
    let mut r = Vec::with_capacity(pairs.len());
    let mut j = Vec::with_capacity(pairs.len());
    for &(i, s) in pairs {
        let surfel = &map.surfels()[s];
        r.push(surfel.normal.dot(&(placement.place(i) - surfel.position)));
        let row = surfel.normal.transpose() * placement.jacobian(i);
        j.push(std::array::from_fn(|k| row[k]));
    }
    (r, j)
}

/// Applies a 12-vector perturbation `[ω_a, v_a, ω_b, v_b]` to the two poses.
pub fn perturb_segment(a: &Pose, b: &Pose, d: &[f64; 12]) -> (Pose, Pose) {
    let v = |k: usize| Vector3::new(d[k], d[k + 1], d[k + 2]);
    (perturb_pose(a, &v(0), &v(3)), perturb_pose(b, &v(6), &v(9)))
}
