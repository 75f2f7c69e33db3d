use serde::{Deserialize, Serialize};

use super::energy::{energy, term_rows, term_weight, ConstraintSet, EnergyBreakdown, Term};
use super::graph::{DeformationGraph, PARAMS_PER_NODE};
use super::sparse::SkylineMatrix;
use super::DeformationError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub initial_damping: f64,
    /// Accepted steps never lower λ below this; it keeps directions the
    /// energy does not see (roll about a straight chain) from drifting.
    pub min_damping: f64,
    pub max_damping: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-9,
            initial_damping: 1e-4,
            min_damping: 1e-12,
            max_damping: 1e10,
        }
    }
}

/// One trial step. Entry 0 is the starting point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
    pub damping: f64,
    pub accepted: bool,
}

/// Below this the problem is solved to machine precision.
const ENERGY_FLOOR: f64 = 1e-20;

/// Normal equations `H = JᵀWJ`, `b = JᵀWr` over all terms.
fn normal_equations(graph: &DeformationGraph, cs: &ConstraintSet) -> (SkylineMatrix, Vec<f64>) {
    let n = graph.len() * PARAMS_PER_NODE;
    let terms: Vec<_> = Term::ALL
        .iter()
        .map(|&t| (term_weight(graph, t), term_rows(graph, cs, t)))
        .collect();
    // every node block is kept dense so damping always has a diagonal slot
    let mut first: Vec<usize> = (0..n).map(|i| i - i % PARAMS_PER_NODE).collect();
    for (_, rows) in &terms {
        for row in rows {
            let Some(lo) = row.entries.iter().map(|e| e.0).min() else {
                continue;
            };
            for &(c, _) in &row.entries {
                first[c] = first[c].min(lo);
            }
        }
    }
    let mut h = SkylineMatrix::zeros(first);
    let mut b = vec![0.0; n];
    for (w, rows) in &terms {
        if *w == 0.0 {
            continue;
        }
        for row in rows {
            for &(i, vi) in &row.entries {
                b[i] += w * vi * row.r;
                for &(j, vj) in &row.entries {
                    if j <= i {
                        h.add(i, j, w * vi * vj);
                    }
                }
            }
        }
    }
    (h, b)
}

/// Levenberg-damped Gauss–Newton over all node parameters.
pub fn optimize_graph(
    graph: &DeformationGraph,
    cs: &ConstraintSet,
    params: &SolverParams,
) -> Result<(DeformationGraph, Vec<IterationLog>), DeformationError> {
    if cs.is_empty() {
        return Err(DeformationError::NoConstraints);
    }
    if graph.is_empty() {
        return Err(DeformationError::EmptyGraph);
    }
    if params.max_iters == 0 {
        return Err(DeformationError::InvalidParams("max_iters must be >= 1".into()));
    }
    graph.weights.validate()?;
    let mut current = graph.clone();
    let mut e = energy(&current, cs);
    let mut lambda = params.initial_damping;
    let mut log = vec![IterationLog {
        iteration: 0,
        energy: e,
        damping: lambda,
        accepted: true,
    }];
    let mut x = current.parameters();
    'outer: for iteration in 1..=params.max_iters {
        if e.total <= ENERGY_FLOOR {
            break;
        }
        let (h, b) = normal_equations(&current, cs);
        loop {
            let mut damped = h.clone();
            damped.add_diagonal(lambda);
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > params.max_damping {
                    return Err(DeformationError::NumericalFailure { damping: lambda });
                }
                continue;
            };
            let step = chol.solve(&b);
            let trial_x: Vec<f64> = x.iter().zip(&step).map(|(p, d)| p - d).collect();
            let trial = current.with_parameters(&trial_x);
            let e_trial = energy(&trial, cs);
            let accepted = e_trial.total.is_finite() && e_trial.total < e.total;
            log.push(IterationLog {
                iteration,
                energy: e_trial,
                damping: lambda,
                accepted,
            });
            if accepted {
                let rel = (e.total - e_trial.total) / e.total;
                x = trial_x;
                current = trial;
                e = e_trial;
                lambda = (lambda / 10.0).max(params.min_damping);
                if rel < params.rel_tol {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > params.max_damping {
                // no improving step at any damping: a local minimum
                break 'outer;
            }
        }
    }
    Ok((current, log))
}
