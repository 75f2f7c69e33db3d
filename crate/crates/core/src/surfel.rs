//! Surfel map: extraction of oriented disks from locally planar voxels,
//! confidence-weighted fusion, and spatial queries.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{eigen_symmetric3, SpatialIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfelError {
    #[error("invalid surfel parameter: {0}")]
    InvalidParams(String),
}

/// A raw measurement: a 3D point and its absolute timestamp. The frame
/// (sensor or world) depends on context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSample {
    pub position: Vector3<f64>,
    pub time: f64,
}

impl PointSample {
    pub fn new(position: Vector3<f64>, time: f64) -> Self {
        Self { position, time }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    /// Accumulated support (number of fused points).
    pub confidence: f64,
    /// Creation time, seconds.
    pub time: f64,
}

impl Surfel {
    pub fn is_valid(&self) -> bool {
        (self.normal.norm() - 1.0).abs() <= 1e-9
            && self.radius > 0.0
            && self.confidence >= 1.0
            && self.position.iter().all(|v| v.is_finite())
            && self.time.is_finite()
    }

    /// Angle between the two normals in degrees.
    pub fn normal_angle_deg(&self, other: &Surfel) -> f64 {
        self.normal.dot(&other.normal).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Euclidean distance from `p` to the surfel disk.
    pub fn disk_distance(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.position;
        let h = self.normal.dot(&d);
        let rho = (d - self.normal * h).norm();
        let out = (rho - self.radius).max(0.0);
        (h * h + out * out).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelParams {
    pub voxel: f64,
    pub min_points: usize,
    pub planarity_eps: f64,
    pub merge_radius: f64,
    pub max_normal_angle_deg: f64,
}

impl Default for SurfelParams {
    fn default() -> Self {
        Self {
            voxel: 0.5,
            min_points: 5,
            planarity_eps: 0.1,
            merge_radius: 0.25,
            max_normal_angle_deg: 30.0,
        }
    }
}

impl SurfelParams {
    pub fn validate(&self) -> Result<(), SurfelError> {
        if !(self.voxel > 0.0 && self.voxel.is_finite()) {
            return Err(SurfelError::InvalidParams(format!(
                "voxel must be > 0, got {}",
                self.voxel
            )));
        }
        if self.min_points < 3 {
            return Err(SurfelError::InvalidParams(format!(
                "min_points must be >= 3, got {}",
                self.min_points
            )));
        }
        if !(self.planarity_eps >= 0.0) {
            return Err(SurfelError::InvalidParams("planarity_eps must be >= 0".into()));
        }
        if !(self.merge_radius > 0.0) {
            return Err(SurfelError::InvalidParams("merge_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// A surfel together with the index of the contributing point closest to
/// its centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracedSurfel {
    pub surfel: Surfel,
    pub representative: usize,
}

type VoxelKey = (i64, i64, i64);

fn voxel_key(p: &Vector3<f64>, voxel: f64) -> VoxelKey {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Fits one surfel per planar voxel of world-frame `points`.
///
/// Normals point toward `sensor_origin`. Output is ordered by voxel key and
/// does not depend on the order of `points`.
pub fn extract_surfels(
    points: &[PointSample],
    params: &SurfelParams,
    sensor_origin: &Vector3<f64>,
) -> Result<Vec<Surfel>, SurfelError> {
    Ok(extract_surfels_traced(points, params, sensor_origin)?
        .into_iter()
        .map(|t| t.surfel)
        .collect())
}

pub fn extract_surfels_traced(
    points: &[PointSample],
    params: &SurfelParams,
    sensor_origin: &Vector3<f64>,
) -> Result<Vec<TracedSurfel>, SurfelError> {
    params.validate()?;
    let mut voxels: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if p.position.iter().all(|v| v.is_finite()) {
            voxels.entry(voxel_key(&p.position, params.voxel)).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for members in voxels.values_mut() {
        if members.len() < params.min_points {
            continue;
        }
        // canonical order so that sums are independent of input order
        members.sort_by(|&a, &b| {
            let (pa, pb) = (&points[a], &points[b]);
            pa.time
                .total_cmp(&pb.time)
                .then(pa.position.x.total_cmp(&pb.position.x))
                .then(pa.position.y.total_cmp(&pb.position.y))
                .then(pa.position.z.total_cmp(&pb.position.z))
        });
        if let Some(s) = fit_voxel(points, members, params, sensor_origin) {
            out.push(s);
        }
    }
    Ok(out)
}

fn fit_voxel(
    points: &[PointSample],
    members: &[usize],
    params: &SurfelParams,
    sensor_origin: &Vector3<f64>,
) -> Option<TracedSurfel> {
    let n = members.len() as f64;
    let centroid = members
        .iter()
        .fold(Vector3::zeros(), |acc, &i| acc + points[i].position)
        / n;
    let cov = members.iter().fold(Matrix3::zeros(), |acc, &i| {
        let d = points[i].position - centroid;
        acc + d * d.transpose()
    }) / n;
    let eig = eigen_symmetric3(&cov).ok()?;
    let [l_min, l_mid, l_max] = eig.eigenvalues.map(|l| l.max(0.0));
    if l_mid <= 1e-12 * l_max.max(f64::MIN_POSITIVE) || l_max <= 0.0 {
        return None;
    }
    if l_min > params.planarity_eps * l_mid {
        return None;
    }
    let mut normal = eig.eigenvectors[0];
    let facing = normal.dot(&(sensor_origin - centroid));
    if facing < 0.0 {
        normal = -normal;
    } else if facing == 0.0 {
        // deterministic sign when the sensor lies in the plane
        let k = normal.iamax();
        if normal[k] < 0.0 {
            normal = -normal;
        }
    }
    let mut times: Vec<f64> = members.iter().map(|&i| points[i].time).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let m = times.len();
    let time = if m % 2 == 1 {
        times[m / 2]
    } else {
        0.5 * (times[m / 2 - 1] + times[m / 2])
    };
    let representative = *members
        .iter()
        .min_by(|&&a, &&b| {
            let da = (points[a].position - centroid).norm_squared();
            let db = (points[b].position - centroid).norm_squared();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("voxel has members");
    Some(TracedSurfel {
        surfel: Surfel {
            position: centroid,
            normal: normal.normalize(),
            radius: 2.0 * l_max.sqrt(),
            confidence: n,
            time,
        },
        representative,
    })
}

/// Surfels plus a kd-tree over their positions.
#[derive(Clone, Debug, Default)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    index: SpatialIndex,
    voxel: f64,
}

/// What happened to each incoming surfel during fusion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    /// Incoming indices that became new map surfels, in insertion order.
    pub inserted: Vec<usize>,
    /// `(incoming index, map index)` merges.
    pub merged: Vec<(usize, usize)>,
}

impl SurfelMap {
    pub fn new(voxel: f64) -> Self {
        Self {
            surfels: Vec::new(),
            index: SpatialIndex::default(),
            voxel,
        }
    }

    pub fn from_surfels(surfels: Vec<Surfel>, voxel: f64) -> Self {
        let mut map = Self {
            surfels,
            index: SpatialIndex::default(),
            voxel,
        };
        map.commit();
        map
    }

    fn commit(&mut self) {
        let positions: Vec<_> = self.surfels.iter().map(|s| s.position).collect();
        self.index = SpatialIndex::new(&positions);
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn into_surfels(self) -> Vec<Surfel> {
        self.surfels
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn voxel(&self) -> f64 {
        self.voxel
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    /// Indices of surfels within `r` of `center` (inclusive), nearest first.
    pub fn radius_indices(&self, center: &Vector3<f64>, r: f64) -> Vec<usize> {
        self.index.radius(center, r).into_iter().map(|n| n.id).collect()
    }

    pub fn radius_query(&self, center: &Vector3<f64>, r: f64) -> Vec<Surfel> {
        self.radius_indices(center, r)
            .into_iter()
            .map(|i| self.surfels[i])
            .collect()
    }

    /// Sub-map of the surfels accepted by `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&Surfel) -> bool) -> SurfelMap {
        SurfelMap::from_surfels(self.surfels.iter().copied().filter(|s| keep(s)).collect(), self.voxel)
    }

    /// Fuses `incoming` into the map and recommits the index.
    pub fn fuse(&mut self, incoming: &[Surfel], merge_radius: f64, max_normal_angle_deg: f64) -> FusionReport {
        self.fuse_where(incoming, merge_radius, max_normal_angle_deg, |_| true)
    }

    /// Like [`fuse`](Self::fuse), but only surfels accepted by `eligible`
    /// can absorb incoming ones.
    pub fn fuse_where(
        &mut self,
        incoming: &[Surfel],
        merge_radius: f64,
        max_normal_angle_deg: f64,
        eligible: impl Fn(&Surfel) -> bool,
    ) -> FusionReport {
        let mut report = FusionReport::default();
        let snapshot_len = self.surfels.len();
        let mut fresh = Vec::new();
        for (k, inc) in incoming.iter().enumerate() {
            let target = if snapshot_len == 0 {
                None
            } else {
                self.index
                    .radius(&inc.position, merge_radius)
                    .into_iter()
                    .find(|n| eligible(&self.surfels[n.id]))
                    .map(|n| n.id)
            };
            let merged = match target {
                Some(j) => {
                    let s = &self.surfels[j];
                    let close = (s.position - inc.position).norm() < merge_radius;
                    if close && s.normal_angle_deg(inc) < max_normal_angle_deg {
                        self.surfels[j] = merge(s, inc);
                        report.merged.push((k, j));
                        true
                    } else {
                        false
                    }
                }
                None => false,
            };
            if !merged {
                fresh.push(*inc);
                report.inserted.push(k);
            }
        }
        self.surfels.extend(fresh);
        self.commit();
        report
    }
}

fn merge(a: &Surfel, b: &Surfel) -> Surfel {
    let w = a.confidence + b.confidence;
    let position = (a.position * a.confidence + b.position * b.confidence) / w;
    let n = a.normal * a.confidence + b.normal * b.confidence;
    let normal = if n.norm() > 1e-12 { n.normalize() } else { a.normal };
    Surfel {
        position,
        normal,
        radius: a.radius.max(b.radius),
        confidence: w,
        time: a.time.min(b.time),
    }
}

/// Functional form of [`SurfelMap::fuse`].
pub fn fuse_surfels(map: &SurfelMap, incoming: &[Surfel], merge_radius: f64, max_normal_angle_deg: f64) -> SurfelMap {
    let mut out = map.clone();
    out.fuse(incoming, merge_radius, max_normal_angle_deg);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn plane_points(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<PointSample> {
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        (0..n)
            .map(|i| {
                let z = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                PointSample::new(
                    Vector3::new(rng.random_range(0.01..0.49), rng.random_range(0.01..0.49), 0.2 + z),
                    i as f64 * 0.01,
                )
            })
            .collect()
    }

    fn surfel_at(p: Vector3<f64>, conf: f64) -> Surfel {
        Surfel {
            position: p,
            normal: Vector3::z(),
            radius: 0.1,
            confidence: conf,
            time: 1.0,
        }
    }

    #[test]
    fn exact_plane_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = plane_points(&mut rng, 50, 0.0);
        let origin = Vector3::new(0.25, 0.25, 3.0);
        let out = extract_surfels(&pts, &SurfelParams::default(), &origin).unwrap();
        assert_eq!(out.len(), 1);
        let s = out[0];
        assert!((s.normal - Vector3::z()).norm() < 1e-9);
        let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p.position) / 50.0;
        assert!((s.position - centroid).norm() < 1e-12);
        assert_eq!(s.confidence, 50.0);
        assert!(s.is_valid());
    }

    #[test]
    fn support_threshold() {
        let pts = vec![
            PointSample::new(Vector3::new(0.1, 0.1, 0.0), 0.0),
            PointSample::new(Vector3::new(0.2, 0.1, 0.0), 0.0),
        ];
        let params = SurfelParams {
            min_points: 5,
            ..Default::default()
        };
        assert!(extract_surfels(&pts, &params, &Vector3::z()).unwrap().is_empty());
    }

    #[test]
    fn invalid_params() {
        let bad = SurfelParams {
            voxel: -1.0,
            ..Default::default()
        };
        assert!(extract_surfels(&[], &bad, &Vector3::zeros()).is_err());
        let bad = SurfelParams {
            min_points: 2,
            ..Default::default()
        };
        assert!(extract_surfels(&[], &bad, &Vector3::zeros()).is_err());
    }

    #[test]
    fn median_time_and_sign_toward_sensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = plane_points(&mut rng, 10, 0.0);
        let below = Vector3::new(0.25, 0.25, -5.0);
        let s = extract_surfels(&pts, &SurfelParams::default(), &below).unwrap()[0];
        assert!((s.normal + Vector3::z()).norm() < 1e-9);
        // times 0.00..0.09, even count
        assert!((s.time - 0.045).abs() < 1e-15);
    }

    #[test]
    fn noisy_plane_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = plane_points(&mut rng, 200, 0.01);
        let params = SurfelParams {
            voxel: 10.0,
            ..Default::default()
        };
        let s = extract_surfels(&pts, &params, &Vector3::new(0.0, 0.0, 5.0)).unwrap()[0];
        assert!(s.normal.dot(&Vector3::z()).acos().to_degrees() < 2.0);
        // direct covariance oracle: sample std along the major axis
        let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p.position) / 200.0;
        let mut best: f64 = 0.0;
        for k in 0..180 {
            let th = (k as f64).to_radians();
            let dir = Vector3::new(th.cos(), th.sin(), 0.0);
            let var = pts.iter().map(|p| (p.position - c).dot(&dir).powi(2)).sum::<f64>() / 200.0;
            best = best.max(var);
        }
        let expected = 2.0 * best.sqrt();
        assert!((s.radius - expected).abs() <= 0.2 * expected);
    }

    #[test]
    fn non_planar_voxel_is_discarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..100)
            .map(|_| {
                PointSample::new(
                    Vector3::new(
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.0..0.5),
                    ),
                    0.0,
                )
            })
            .collect();
        assert!(extract_surfels(&pts, &SurfelParams::default(), &Vector3::zeros())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn self_merge_doubles_confidence() {
        let s = surfel_at(Vector3::new(1.0, 2.0, 3.0), 2.0);
        let map = SurfelMap::from_surfels(vec![s], 0.5);
        let out = fuse_surfels(&map, &[s], 0.25, 30.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out.surfels()[0].confidence, 4.0);
        assert!((out.surfels()[0].position - s.position).norm() < 1e-15);
    }

    #[test]
    fn distant_surfel_is_inserted() {
        let map = SurfelMap::from_surfels(vec![surfel_at(Vector3::zeros(), 1.0)], 0.5);
        let out = fuse_surfels(&map, &[surfel_at(Vector3::new(10.0, 0.0, 0.0), 1.0)], 0.25, 30.0);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn weighted_merge_position() {
        let r = 0.4;
        let map = SurfelMap::from_surfels(vec![surfel_at(Vector3::zeros(), 1.0)], 0.5);
        let inc = surfel_at(Vector3::new(0.5 * r, 0.0, 0.0), 3.0);
        let out = fuse_surfels(&map, &[inc], r, 30.0);
        assert_eq!(out.len(), 1);
        // (0·1 + 0.2·3) / 4
        assert!((out.surfels()[0].position - Vector3::new(0.15, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn normal_gate_blocks_merge() {
        let map = SurfelMap::from_surfels(vec![surfel_at(Vector3::zeros(), 1.0)], 0.5);
        let mut inc = surfel_at(Vector3::new(0.05, 0.0, 0.0), 1.0);
        inc.normal = Vector3::x();
        let out = fuse_surfels(&map, &[inc], 0.25, 30.0);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn earlier_time_survives_merge() {
        let mut a = surfel_at(Vector3::zeros(), 1.0);
        a.time = 5.0;
        let mut b = a;
        b.time = 2.0;
        let out = fuse_surfels(&SurfelMap::from_surfels(vec![a], 0.5), &[b], 0.25, 30.0);
        assert_eq!(out.surfels()[0].time, 2.0);
    }

    #[test]
    fn radius_query_cases() {
        let empty = SurfelMap::new(0.5);
        assert!(empty.radius_query(&Vector3::zeros(), 1.0).is_empty());
        let map = SurfelMap::from_surfels(vec![surfel_at(Vector3::zeros(), 1.0)], 0.5);
        assert_eq!(map.radius_query(&Vector3::zeros(), 0.0).len(), 1);
    }

    #[test]
    fn disk_distance() {
        let s = surfel_at(Vector3::zeros(), 1.0);
        assert_eq!(s.disk_distance(&Vector3::new(0.05, 0.0, 0.0)), 0.0);
        assert!((s.disk_distance(&Vector3::new(0.0, 0.0, 0.3)) - 0.3).abs() < 1e-15);
        assert!((s.disk_distance(&Vector3::new(0.4, 0.0, 0.0)) - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn extraction_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<_> = (0..400).map(|i| {
                let u = rng.random_range(-2.0..2.0);
                let v = rng.random_range(-2.0..2.0);
                let p = if i % 2 == 0 { Vector3::new(u, v, 0.3) } else { Vector3::new(1.3, u, v) };
                PointSample::new(p, rng.random_range(0.0..1.0))
            }).collect();
            let origin = Vector3::new(0.1, 0.2, 1.0);
            let a = extract_surfels(&pts, &SurfelParams::default(), &origin).unwrap();
            pts.shuffle(&mut rng);
            let b = extract_surfels(&pts, &SurfelParams::default(), &origin).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fusion_is_size_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let mut s = surfel_at(Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0), rng.random_range(1.0..5.0));
                s.normal = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
                s
            };
            let existing: Vec<_> = (0..50).map(|_| mk(&mut rng)).collect();
            let incoming: Vec<_> = (0..50).map(|_| mk(&mut rng)).collect();
            let map = SurfelMap::from_surfels(existing, 0.5);
            let out = fuse_surfels(&map, &incoming, 0.3, 30.0);
            prop_assert!(out.len() <= map.len() + incoming.len());
            prop_assert!(out.surfels().iter().all(|s| s.is_valid()));
            prop_assert_eq!(out.index().len(), out.len());
        }
    }
}
