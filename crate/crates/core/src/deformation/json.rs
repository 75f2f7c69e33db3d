use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::energy::{ConstraintKind, LoopConstraint};
use super::graph::{DeformationGraph, DeformationNode, EnergyWeights};
use super::DeformationError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    g: [f64; 3],
    time: f64,
    #[serde(rename = "A")]
    a: [[f64; 3]; 3],
    t: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintJson {
    source: [f64; 3],
    target: [f64; 3],
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<usize>,
}

impl ConstraintJson {
    fn kind(&self) -> Result<ConstraintKind, DeformationError> {
        match (self.kind.as_str(), self.time, self.node) {
            ("surfel", Some(time), None) => Ok(ConstraintKind::Surfel { time }),
            ("node-pin", None, Some(node)) => Ok(ConstraintKind::NodePin { node }),
            (k, _, _) => Err(DeformationError::Malformed(format!(
                "constraint kind {k:?} needs `time` (surfel) or `node` (node-pin)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsJson {
    w_rot: f64,
    w_reg: f64,
    w_con: f64,
    w_pin: f64,
}

/// Serialized form of a graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 2]>,
    #[serde(default = "default_k_bind")]
    k_bind: usize,
    #[serde(default)]
    weights: Option<WeightsJson>,
}

fn default_k_bind() -> usize {
    4
}

/// A graph with its constraints, as read and written by the `deform` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationProblem {
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 2]>,
    #[serde(default = "default_k_bind")]
    k_bind: usize,
    #[serde(default)]
    weights: Option<WeightsJson>,
    #[serde(default)]
    constraints: Vec<ConstraintJson>,
    #[serde(default = "default_window")]
    time_window: f64,
}

fn default_window() -> f64 {
    30.0
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&DeformationGraph> for GraphJson {
    fn from(g: &DeformationGraph) -> Self {
        Self {
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeJson {
                    g: vec3(&n.g),
                    time: n.time,
                    a: std::array::from_fn(|m| std::array::from_fn(|c| n.a[(m, c)])),
                    t: vec3(&n.t),
                })
                .collect(),
            edges: g.edges.iter().map(|&(j, k)| [j, k]).collect(),
            k_bind: g.k_bind,
            weights: Some(WeightsJson {
                w_rot: g.weights.w_rot,
                w_reg: g.weights.w_reg,
                w_con: g.weights.w_con,
                w_pin: g.weights.w_pin,
            }),
        }
    }
}

impl GraphJson {
    pub fn to_graph(&self) -> Result<DeformationGraph, DeformationError> {
        let nodes: Vec<DeformationNode> = self
            .nodes
            .iter()
            .map(|n| DeformationNode {
                g: Vector3::from(n.g),
                time: n.time,
                a: Matrix3::from_fn(|m, c| n.a[m][c]),
                t: Vector3::from(n.t),
            })
            .collect();
        if nodes.windows(2).any(|w| !(w[0].time < w[1].time)) {
            return Err(DeformationError::Malformed(
                "node times must be strictly increasing".into(),
            ));
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for &[j, k] in &self.edges {
            if j >= nodes.len() || k >= nodes.len() || j == k {
                return Err(DeformationError::Malformed(format!("bad edge [{j}, {k}]")));
            }
            edges.push((j.min(k), j.max(k)));
        }
        edges.sort_unstable();
        edges.dedup();
        let weights = self.weights.map_or_else(EnergyWeights::default, |w| EnergyWeights {
            w_rot: w.w_rot,
            w_reg: w.w_reg,
            w_con: w.w_con,
            w_pin: w.w_pin,
        });
        weights.validate()?;
        Ok(DeformationGraph {
            nodes,
            edges,
            k_bind: self.k_bind.max(1),
            weights,
        })
    }
}

impl DeformationProblem {
    pub fn new(graph: &DeformationGraph, constraints: &[LoopConstraint], time_window: f64) -> Self {
        let g = GraphJson::from(graph);
        Self {
            nodes: g.nodes,
            edges: g.edges,
            k_bind: g.k_bind,
            weights: g.weights,
            constraints: constraints
                .iter()
                .map(|c| ConstraintJson {
                    source: vec3(&c.source),
                    target: vec3(&c.target),
                    kind: match c.kind {
                        ConstraintKind::Surfel { .. } => "surfel".into(),
                        ConstraintKind::NodePin { .. } => "node-pin".into(),
                    },
                    time: match c.kind {
                        ConstraintKind::Surfel { time } => Some(time),
                        ConstraintKind::NodePin { .. } => None,
                    },
                    node: match c.kind {
                        ConstraintKind::NodePin { node } => Some(node),
                        ConstraintKind::Surfel { .. } => None,
                    },
                })
                .collect(),
            time_window,
        }
    }

    pub fn graph(&self) -> Result<DeformationGraph, DeformationError> {
        GraphJson {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            k_bind: self.k_bind,
            weights: self.weights,
        }
        .to_graph()
    }

    pub fn constraints(&self) -> Result<Vec<LoopConstraint>, DeformationError> {
        self.constraints
            .iter()
            .map(|c| {
                Ok(LoopConstraint {
                    source: Vector3::from(c.source),
                    target: Vector3::from(c.target),
                    kind: c.kind()?,
                })
            })
            .collect()
    }

    pub fn time_window(&self) -> f64 {
        self.time_window
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DeformationError> {
        serde_json::from_str(text).map_err(|e| DeformationError::Malformed(e.to_string()))
    }
}
