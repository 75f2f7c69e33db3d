//! Revisit detection by trajectory proximity, verification by rigid submap
//! registration, and conversion of verified loops into deformation
//! constraints.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deformation::{DeformationGraph, LoopConstraint};
use crate::geometry::Pose;
use crate::odometry::{find_correspondence, register_rigid, RegistrationParams};
use crate::surfel::{Surfel, SurfelMap};
use crate::trajectory::ContinuousTrajectory;

/// Correspondence gates of the coarse-to-fine verification ICP.
const VERIFY_GATES: [f64; 3] = [2.0, 1.0, 0.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopParams {
    pub min_time_gap: f64,
    pub max_detect_dist: f64,
    pub submap_halfwidth: f64,
    pub max_fitness: f64,
    pub min_inliers: f64,
    pub n_samples: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            min_time_gap: 20.0,
            max_detect_dist: 3.0,
            submap_halfwidth: 5.0,
            max_fitness: 0.1,
            min_inliers: 0.3,
            n_samples: 50,
        }
    }
}

impl LoopParams {
    /// A surfel of B counts as an inlier when its disk distance to A is
    /// within this after alignment.
    pub fn inlier_dist(&self) -> f64 {
        2.0 * self.max_fitness
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub time_a: f64,
    pub time_b: f64,
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifiedLoop {
    pub candidate: LoopCandidate,
    /// World-frame motion taking submap B onto submap A.
    pub relative: Pose,
    pub fitness: f64,
    pub inlier_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Fitness,
    Inliers,
    EmptySubmap,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LoopError {
    #[error("loop rejected ({0:?})")]
    Rejected(RejectReason),
}

/// Pairs of controls at least `min_time_gap` apart in time and at most
/// `max_detect_dist` apart in space, reduced to the closest pair of each
/// revisit event. An event is a connected region of such pairs in
/// (index a, index b) space; events whose best pairs lie within
/// ±`min_time_gap / 2` of each other in both times are merged.
pub fn detect_candidates(traj: &ContinuousTrajectory, min_time_gap: f64, max_detect_dist: f64) -> Vec<LoopCandidate> {
    let c = traj.controls();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, a) in c.iter().enumerate() {
        for (j, b) in c.iter().enumerate().skip(i + 1) {
            if b.time - a.time < min_time_gap {
                continue;
            }
            let d = a.pose.translation_distance(&b.pose);
            if d <= max_detect_dist {
                slot.insert((i, j), pairs.len());
                pairs.push((i, j, d));
            }
        }
    }
    let mut parent: Vec<usize> = (0..pairs.len()).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (k, &(i, j, _)) in pairs.iter().enumerate() {
        for (di, dj) in [(0, 1), (1, 0), (1, 1), (1, usize::MAX)] {
            let ni = i + di;
            let nj = j.wrapping_add(dj);
            if let Some(&m) = slot.get(&(ni, nj)) {
                let (ra, rb) = (root(&mut parent, k), root(&mut parent, m));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let better = |x: &LoopCandidate, y: &LoopCandidate| {
        x.separation
            .total_cmp(&y.separation)
            .then(x.time_a.total_cmp(&y.time_a))
            .then(x.time_b.total_cmp(&y.time_b))
    };
    let mut best: BTreeMap<usize, LoopCandidate> = BTreeMap::new();
    for (k, &(i, j, d)) in pairs.iter().enumerate() {
        let cand = LoopCandidate {
            time_a: c[i].time,
            time_b: c[j].time,
            separation: d,
        };
        let r = root(&mut parent, k);
        let entry = best.entry(r).or_insert(cand);
        if better(&cand, entry).is_lt() {
            *entry = cand;
        }
    }
    let mut events: Vec<LoopCandidate> = best.into_values().collect();
    events.sort_by(better);
    let half = 0.5 * min_time_gap;
    let mut kept: Vec<LoopCandidate> = Vec::new();
    for cand in events {
        let near = kept
            .iter()
            .any(|k| (k.time_a - cand.time_a).abs() <= half && (k.time_b - cand.time_b).abs() <= half);
        if !near {
            kept.push(cand);
        }
    }
    kept.sort_by(|x, y| x.time_a.total_cmp(&y.time_a).then(x.time_b.total_cmp(&y.time_b)));
    kept
}

/// Indices of surfels created within `halfwidth` of `time`.
pub fn submap_indices(map: &SurfelMap, time: f64, halfwidth: f64) -> Vec<usize> {
    map.surfels()
        .iter()
        .enumerate()
        .filter(|(_, s)| (s.time - time).abs() <= halfwidth)
        .map(|(i, _)| i)
        .collect()
}

fn submap(map: &SurfelMap, time: f64, halfwidth: f64) -> Vec<Surfel> {
    submap_indices(map, time, halfwidth)
        .into_iter()
        .map(|i| map.surfels()[i])
        .collect()
}

/// RMS disk distance of `points` to `target`, over points within `gate`,
/// and the fraction of points that were within it.
pub fn alignment_stats(target: &SurfelMap, points: &[Vector3<f64>], gate: f64) -> (f64, f64) {
    if points.is_empty() || target.is_empty() {
        return (0.0, 0.0);
    }
    let d: Vec<f64> = crate::parallel::map_slice(points, |p| {
        find_correspondence(target, p, gate).map_or(f64::INFINITY, |i| target.surfels()[i].disk_distance(p))
    });
    let inl: Vec<f64> = d.into_iter().filter(|x| x.is_finite()).collect();
    let frac = inl.len() as f64 / points.len() as f64;
    let rms = if inl.is_empty() {
        f64::INFINITY
    } else {
        (inl.iter().map(|x| x * x).sum::<f64>() / inl.len() as f64).sqrt()
    };
    (rms, frac)
}

/// Aligns the later submap onto the earlier one with rigid point-to-plane
/// ICP from the identity and accepts it on fitness and inlier share.
pub fn verify_candidate(map: &SurfelMap, cand: &LoopCandidate, params: &LoopParams) -> Result<VerifiedLoop, LoopError> {
    let a = submap(map, cand.time_a, params.submap_halfwidth);
    let b = submap(map, cand.time_b, params.submap_halfwidth);
    if a.is_empty() || b.is_empty() {
        return Err(LoopError::Rejected(RejectReason::EmptySubmap));
    }
    let target = SurfelMap::from_surfels(a, map.voxel());
    let points: Vec<Vector3<f64>> = b.iter().map(|s| s.position).collect();
    let pivot = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut local = Pose::identity();
    for gate in VERIFY_GATES {
        let icp = RegistrationParams {
            max_corr_dist: gate,
            huber_delta: params.max_fitness,
            tol: 1e-7,
            max_iters: 30,
            min_matches: 10,
            prior_weight: 0.0,
        };
        match register_rigid(&target, &points, &pivot, &local, &icp) {
            Ok(r) => {
                // back to the pivot-relative parameterization
                local = Pose::new(r.pose.rotation, r.pose.translation + r.pose.rotation * pivot - pivot);
            }
            Err(_) => return Err(LoopError::Rejected(RejectReason::Inliers)),
        }
    }
    let relative = Pose::new(local.rotation, pivot + local.translation - local.rotation * pivot);
    let moved: Vec<Vector3<f64>> = points.iter().map(|p| relative.transform_point(p)).collect();
    let (fitness, inlier_fraction) = alignment_stats(&target, &moved, params.inlier_dist());
    if !(inlier_fraction > params.min_inliers) {
        return Err(LoopError::Rejected(RejectReason::Inliers));
    }
    if !(fitness < params.max_fitness) {
        return Err(LoopError::Rejected(RejectReason::Fitness));
    }
    Ok(VerifiedLoop {
        candidate: *cand,
        relative,
        fitness,
        inlier_fraction,
    })
}

/// Evenly spaced surfels of submap B pulled to their aligned positions, plus
/// pins on every node of the earlier pass.
pub fn build_constraints(
    lp: &VerifiedLoop,
    map: &SurfelMap,
    graph: &DeformationGraph,
    params: &LoopParams,
) -> Result<Vec<LoopConstraint>, LoopError> {
    let b = submap_indices(map, lp.candidate.time_b, params.submap_halfwidth);
    if b.is_empty() {
        return Err(LoopError::Rejected(RejectReason::EmptySubmap));
    }
    let n = params.n_samples.min(b.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = map.surfels()[b[i * b.len() / n]];
        out.push(LoopConstraint::surfel(
            s.position,
            lp.relative.transform_point(&s.position),
            s.time,
        ));
    }
    for (j, node) in graph.nodes.iter().enumerate() {
        if (node.time - lp.candidate.time_a).abs() <= params.submap_halfwidth {
            out.push(LoopConstraint::pin(graph, j));
        }
    }
    Ok(out)
}
