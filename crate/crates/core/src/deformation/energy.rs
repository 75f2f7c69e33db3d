use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::graph::{Binding, DeformationGraph, PARAMS_PER_NODE};
use super::DeformationError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintKind {
    /// A map point created at `time`; bound to nodes near that time.
    Surfel { time: f64 },
    /// Anchors node `node`: its translated position is pulled to the target
    /// and its linear map to the identity.
    NodePin { node: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConstraint {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    pub kind: ConstraintKind,
}

impl LoopConstraint {
    pub fn surfel(source: Vector3<f64>, target: Vector3<f64>, time: f64) -> Self {
        Self {
            source,
            target,
            kind: ConstraintKind::Surfel { time },
        }
    }

    /// Pin of a node at its current position.
    pub fn pin(graph: &DeformationGraph, node: usize) -> Self {
        let g = graph.nodes[node].g;
        Self {
            source: g,
            target: g,
            kind: ConstraintKind::NodePin { node },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundConstraint {
    pub constraint: LoopConstraint,
    pub binding: Binding,
}

/// Constraints with their bindings precomputed against one graph.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConstraintSet {
    pub items: Vec<BoundConstraint>,
}

impl ConstraintSet {
    pub fn bind(
        graph: &DeformationGraph,
        constraints: &[LoopConstraint],
        time_window: f64,
    ) -> Result<Self, DeformationError> {
        let mut items = Vec::with_capacity(constraints.len());
        for c in constraints {
            let binding = match c.kind {
                ConstraintKind::Surfel { time } => graph.bind_point(&c.source, time, time_window)?,
                ConstraintKind::NodePin { node } => {
                    if node >= graph.len() {
                        return Err(DeformationError::InvalidParams(format!(
                            "pinned node {node} out of range ({} nodes)",
                            graph.len()
                        )));
                    }
                    Binding::single(node)
                }
            };
            items.push(BoundConstraint {
                constraint: c.clone(),
                binding,
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pin_count(&self) -> usize {
        self.items
            .iter()
            .filter(|c| matches!(c.constraint.kind, ConstraintKind::NodePin { .. }))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_rot: f64,
    pub e_reg: f64,
    pub e_con: f64,
    pub e_pin: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Rot,
    Reg,
    Con,
    Pin,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Rot, Term::Reg, Term::Con, Term::Pin];
}

/// One scalar residual with its sparse gradient over the flat parameters.
pub(crate) struct Row {
    pub r: f64,
    pub entries: Vec<(usize, f64)>,
}

fn a_index(node: usize, m: usize, n: usize) -> usize {
    node * PARAMS_PER_NODE + 3 * m + n
}

fn t_index(node: usize, m: usize) -> usize {
    node * PARAMS_PER_NODE + 9 + m
}

fn rotation_rows(graph: &DeformationGraph, out: &mut Vec<Row>) {
    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2)];
    for (j, node) in graph.nodes.iter().enumerate() {
        let a = &node.a;
        for (p, q) in PAIRS {
            let dot = a.column(p).dot(&a.column(q));
            let mut entries = Vec::with_capacity(6);
            if p == q {
                for m in 0..3 {
                    entries.push((a_index(j, m, p), 2.0 * a[(m, p)]));
                }
                out.push(Row { r: dot - 1.0, entries });
            } else {
                for m in 0..3 {
                    entries.push((a_index(j, m, p), a[(m, q)]));
                    entries.push((a_index(j, m, q), a[(m, p)]));
                }
                out.push(Row { r: dot, entries });
            }
        }
    }
}

fn regularization_rows(graph: &DeformationGraph, out: &mut Vec<Row>) {
    for &(j0, k0) in &graph.edges {
        for (j, k) in [(j0, k0), (k0, j0)] {
            let nj = &graph.nodes[j];
            let nk = &graph.nodes[k];
            let d = nk.g - nj.g;
            let r = nj.a * d + nj.g + nj.t - (nk.g + nk.t);
            for m in 0..3 {
                let mut entries = Vec::with_capacity(5);
                for n in 0..3 {
                    entries.push((a_index(j, m, n), d[n]));
                }
                entries.push((t_index(j, m), 1.0));
                entries.push((t_index(k, m), -1.0));
                out.push(Row { r: r[m], entries });
            }
        }
    }
}

fn constraint_rows(graph: &DeformationGraph, cs: &ConstraintSet, out: &mut Vec<Row>) {
    for c in &cs.items {
        if !matches!(c.constraint.kind, ConstraintKind::Surfel { .. }) {
            continue;
        }
        let v = c.constraint.source;
        let r = graph.deform_point(&c.binding, &v) - c.constraint.target;
        for m in 0..3 {
            let mut entries = Vec::with_capacity(4 * c.binding.nodes.len());
            for (j, w) in c.binding.iter() {
                let local = v - graph.nodes[j].g;
                for n in 0..3 {
                    entries.push((a_index(j, m, n), w * local[n]));
                }
                entries.push((t_index(j, m), w));
            }
            out.push(Row { r: r[m], entries });
        }
    }
}

fn pin_rows(graph: &DeformationGraph, cs: &ConstraintSet, out: &mut Vec<Row>) {
    for c in &cs.items {
        let ConstraintKind::NodePin { node: j } = c.constraint.kind else {
            continue;
        };
        let node = &graph.nodes[j];
        let r = node.g + node.t - c.constraint.target;
        for m in 0..3 {
            out.push(Row {
                r: r[m],
                entries: vec![(t_index(j, m), 1.0)],
            });
        }
        for m in 0..3 {
            for n in 0..3 {
                let id = if m == n { 1.0 } else { 0.0 };
                out.push(Row {
                    r: node.a[(m, n)] - id,
                    entries: vec![(a_index(j, m, n), 1.0)],
                });
            }
        }
    }
}

pub(crate) fn term_rows(graph: &DeformationGraph, cs: &ConstraintSet, term: Term) -> Vec<Row> {
    let mut rows = Vec::new();
    match term {
        Term::Rot => rotation_rows(graph, &mut rows),
        Term::Reg => regularization_rows(graph, &mut rows),
        Term::Con => constraint_rows(graph, cs, &mut rows),
        Term::Pin => pin_rows(graph, cs, &mut rows),
    }
    rows
}

pub(crate) fn term_weight(graph: &DeformationGraph, term: Term) -> f64 {
    let w = graph.weights;
    match term {
        Term::Rot => w.w_rot,
        Term::Reg => w.w_reg,
        Term::Con => w.w_con,
        Term::Pin => w.w_pin,
    }
}

/// Unweighted residuals of one energy term.
pub fn stacked_residuals(graph: &DeformationGraph, cs: &ConstraintSet, term: Term) -> Vec<f64> {
    term_rows(graph, cs, term).into_iter().map(|r| r.r).collect()
}

/// Dense analytic Jacobian of [`stacked_residuals`], one row per residual.
pub fn stacked_jacobian(graph: &DeformationGraph, cs: &ConstraintSet, term: Term) -> Vec<Vec<f64>> {
    let n = graph.len() * PARAMS_PER_NODE;
    term_rows(graph, cs, term)
        .into_iter()
        .map(|row| {
            let mut dense = vec![0.0; n];
            for (c, v) in row.entries {
                dense[c] += v;
            }
            dense
        })
        .collect()
}

pub fn energy(graph: &DeformationGraph, cs: &ConstraintSet) -> EnergyBreakdown {
    let sq = |term| stacked_residuals(graph, cs, term).iter().map(|r| r * r).sum::<f64>();
    let e_rot = sq(Term::Rot);
    let e_reg = sq(Term::Reg);
    let e_con = sq(Term::Con);
    let e_pin = sq(Term::Pin);
    let w = graph.weights;
    EnergyBreakdown {
        e_rot,
        e_reg,
        e_con,
        e_pin,
        total: w.w_rot * e_rot + w.w_reg * e_reg + w.w_con * e_con + w.w_pin * e_pin,
    }
}
