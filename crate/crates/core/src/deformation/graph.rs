use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::DeformationError;
use crate::trajectory::ContinuousTrajectory;

/// 9 entries of `A` (row-major) followed by the 3 of `t`.
pub const PARAMS_PER_NODE: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNode {
    pub g: Vector3<f64>,
    pub time: f64,
    pub a: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl DeformationNode {
    pub fn new(g: Vector3<f64>, time: f64) -> Self {
        Self {
            g,
            time,
            a: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// `A (v − g) + g + t`.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.a * (v - self.g) + self.g + self.t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyWeights {
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_con: f64,
    pub w_pin: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            w_rot: 1.0,
            w_reg: 10.0,
            w_con: 100.0,
            w_pin: 100.0,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), DeformationError> {
        for (name, w) in [
            ("w_rot", self.w_rot),
            ("w_reg", self.w_reg),
            ("w_con", self.w_con),
            ("w_pin", self.w_pin),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(DeformationError::InvalidParams(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Blending of one point over its nearest admissible nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Binding {
    pub fn single(node: usize) -> Self {
        Self {
            nodes: vec![node],
            weights: vec![1.0],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGraph {
    pub nodes: Vec<DeformationNode>,
    /// Undirected edges stored once as `(j, k)` with `j < k`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub k_bind: usize,
    pub weights: EnergyWeights,
}

/// Samples nodes every `node_spacing` meters of translational arc length and
/// links each node to its `k_edge` neighbours on either side in time order.
pub fn build_graph(
    traj: &ContinuousTrajectory,
    node_spacing: f64,
    k_edge: usize,
) -> Result<DeformationGraph, DeformationError> {
    if traj.is_empty() {
        return Err(DeformationError::EmptyTrajectory);
    }
    if !(node_spacing > 0.0 && node_spacing.is_finite()) {
        return Err(DeformationError::InvalidParams("node_spacing must be > 0".into()));
    }
    if k_edge == 0 {
        return Err(DeformationError::InvalidParams("k_edge must be >= 1".into()));
    }
    // accumulated float error over many short segments must not drop a node
    let threshold = node_spacing * (1.0 - 1e-9);
    let controls = traj.controls();
    let mut nodes = vec![DeformationNode::new(controls[0].pose.translation, controls[0].time)];
    let mut acc = 0.0;
    for w in controls.windows(2) {
        acc += (w[1].pose.translation - w[0].pose.translation).norm();
        if acc >= threshold {
            nodes.push(DeformationNode::new(w[1].pose.translation, w[1].time));
            acc = 0.0;
        }
    }
    Ok(DeformationGraph::from_nodes(nodes, k_edge))
}

impl DeformationGraph {
    pub fn from_nodes(nodes: Vec<DeformationNode>, k_edge: usize) -> Self {
        let n = nodes.len();
        let mut edges = Vec::new();
        for j in 0..n {
            for k in (j + 1)..n.min(j + k_edge + 1) {
                edges.push((j, k));
            }
        }
        Self {
            nodes,
            edges,
            k_bind: 4,
            weights: EnergyWeights::default(),
        }
    }

    pub fn with_k_bind(mut self, k_bind: usize) -> Self {
        self.k_bind = k_bind.max(1);
        self
    }

    pub fn with_weights(mut self, weights: EnergyWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Resets every node to the identity deformation.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.a = Matrix3::identity();
            n.t = Vector3::zeros();
        }
    }

    /// Flat parameter vector, [`PARAMS_PER_NODE`] entries per node.
    pub fn parameters(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.nodes.len() * PARAMS_PER_NODE);
        for n in &self.nodes {
            for m in 0..3 {
                for c in 0..3 {
                    x.push(n.a[(m, c)]);
                }
            }
            x.extend(n.t.iter());
        }
        x
    }

    pub fn set_parameters(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.nodes.len() * PARAMS_PER_NODE);
        for (n, p) in self.nodes.iter_mut().zip(x.chunks_exact(PARAMS_PER_NODE)) {
            n.a = Matrix3::from_row_slice(&p[..9]);
            n.t = Vector3::new(p[9], p[10], p[11]);
        }
    }

    pub fn with_parameters(&self, x: &[f64]) -> Self {
        let mut g = self.clone();
        g.set_parameters(x);
        g
    }

    /// Binds `v` to its `k_bind` nearest nodes among those within
    /// `time_window` of `v_time` (all nodes when none are).
    pub fn bind_point(&self, v: &Vector3<f64>, v_time: f64, time_window: f64) -> Result<Binding, DeformationError> {
        if self.nodes.is_empty() {
            return Err(DeformationError::EmptyGraph);
        }
        let mut candidates: Vec<(f64, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.time - v_time).abs() <= time_window)
            .map(|(j, n)| ((v - n.g).norm(), j))
            .collect();
        if candidates.is_empty() {
            candidates = self
                .nodes
                .iter()
                .enumerate()
                .map(|(j, n)| ((v - n.g).norm(), j))
                .collect();
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = self.k_bind.min(candidates.len());
        let d_max = if candidates.len() > k {
            candidates[k].0
        } else {
            1.1 * candidates[k - 1].0
        };
        let chosen = &candidates[..k];
        let mut weights: Vec<f64> = if d_max > 0.0 {
            chosen.iter().map(|(d, _)| (1.0 - d / d_max).max(0.0).powi(2)).collect()
        } else {
            vec![0.0; k]
        };
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 {
            for w in &mut weights {
                *w /= sum;
            }
        } else {
            // every bound node is equally far (or coincident): blend evenly
            weights = vec![1.0 / k as f64; k];
        }
        Ok(Binding {
            nodes: chosen.iter().map(|(_, j)| *j).collect(),
            weights,
        })
    }

    pub fn deform_point(&self, binding: &Binding, v: &Vector3<f64>) -> Vector3<f64> {
        binding
            .iter()
            .fold(Vector3::zeros(), |acc, (j, w)| acc + self.nodes[j].apply(v) * w)
    }

    pub fn deform_normal(&self, binding: &Binding, n: &Vector3<f64>) -> Result<Vector3<f64>, DeformationError> {
        let mut acc = Vector3::zeros();
        for (j, w) in binding.iter() {
            let a = &self.nodes[j].a;
            let det = a.determinant();
            if det.abs() < 1e-9 {
                return Err(DeformationError::SingularNode { node: j, det });
            }
            let inv_t = a
                .try_inverse()
                .ok_or(DeformationError::SingularNode { node: j, det })?
                .transpose();
            acc += inv_t * n * w;
        }
        let norm = acc.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(DeformationError::SingularNode {
                node: binding.nodes[0],
                det: 0.0,
            });
        }
        Ok(acc / norm)
    }

    /// Nearest rotation (polar factor) of the blended linear map.
    pub fn blended_rotation(&self, binding: &Binding) -> UnitQuaternion<f64> {
        let m = binding
            .iter()
            .fold(Matrix3::zeros(), |acc, (j, w)| acc + self.nodes[j].a * w);
        nearest_rotation(&m)
    }
}

pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return UnitQuaternion::identity();
    };
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    UnitQuaternion::from_matrix(&r)
}
