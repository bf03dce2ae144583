//! Exact nearest-neighbor search over a static 3D point set.

use crate::error::{Error, Result};
use crate::mesh::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree. Queries are exact; equidistant candidates resolve to the
/// lowest point index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Insufficient(
                "spatial index needs at least one point".into(),
            ));
        }
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (lo, hi) = self.order[start..end].iter().fold(
            (self.points[self.order[start]], self.points[self.order[start]]),
            |(lo, hi), &i| (lo.inf(&self.points[i]), hi.sup(&self.points[i])),
        );
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn nearest(&self, query: &Vec3) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, query, &mut best);
        Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
        }
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // Equal distance must still be explored for the index tie-break.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}
