use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use super::GeometryError;

const LEAF_SIZE: usize = 8;

/// Query hit: payload identifier and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over 3-vectors.
///
/// Results are ordered by `(squared distance, id)`, which is exactly the
/// order a linear scan produces, ties included.
#[derive(Clone, Debug, Default)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    /// Indexes `points` with identifiers `0..n`.
    pub fn new(points: &[Vector3<f64>]) -> Self {
        Self::with_ids(points.iter().copied().zip(0..))
    }

    pub fn with_ids(items: impl IntoIterator<Item = (Vector3<f64>, usize)>) -> Self {
        let (points, ids): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let mut index = Self {
            points,
            ids,
            nodes: Vec::new(),
        };
        if !index.points.is_empty() {
            let n = index.points.len();
            index.build(0, n);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mut lo = self.points[start];
        let mut hi = lo;
        for p in &self.points[start..end] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let mut order: Vec<usize> = (start..end).collect();
        order.select_nth_unstable_by(mid - start, |&a, &b| {
            self.points[a][axis].total_cmp(&self.points[b][axis])
        });
        let pts: Vec<_> = order.iter().map(|&i| self.points[i]).collect();
        let ids: Vec<_> = order.iter().map(|&i| self.ids[i]).collect();
        self.points[start..end].copy_from_slice(&pts);
        self.ids[start..end].copy_from_slice(&ids);
        let value = self.points[mid][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// The `k` nearest payloads, ascending. Returns everything if `k`
    /// exceeds the index size.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Result<Vec<Neighbor>, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyIndex);
        }
        let k = k.max(1).min(self.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, query, k, &mut heap);
        Ok(finish(heap.into_vec()))
    }

    /// Nearest payload.
    pub fn nearest(&self, query: &Vector3<f64>) -> Result<Neighbor, GeometryError> {
        Ok(self.knn(query, 1)?[0])
    }

    fn knn_recurse(&self, node: usize, q: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let c = Candidate {
                        d2: (self.points[i] - q).norm_squared(),
                        id: self.ids[i],
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_recurse(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").d2 {
                    self.knn_recurse(far, q, k, heap);
                }
            }
        }
    }

    /// Everything with `‖p − center‖² ≤ r²`, ascending.
    pub fn radius(&self, center: &Vector3<f64>, r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if self.is_empty() || r < 0.0 {
            return Vec::new();
        }
        let r2 = r * r;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for i in start..end {
                        let d2 = (self.points[i] - center).norm_squared();
                        if d2 <= r2 {
                            out.push(Candidate { d2, id: self.ids[i] });
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = center[axis] - value;
                    if diff <= 0.0 || diff * diff <= r2 {
                        stack.push(left);
                    }
                    if diff >= 0.0 || diff * diff <= r2 {
                        stack.push(right);
                    }
                }
            }
        }
        finish(out)
    }
}

fn finish(mut cands: Vec<Candidate>) -> Vec<Neighbor> {
    cands.sort_unstable();
    cands
        .into_iter()
        .map(|c| Neighbor {
            id: c.id,
            distance: c.d2.sqrt(),
        })
        .collect()
}
