//! Exact nearest-neighbor search over 3D points.
//!
//! The k-d tree returns exactly what a brute-force scan would: the reference
//! point with the smallest squared distance, and among equal distances the
//! one with the smallest index. Pruning only skips a subtree when its
//! splitting plane is strictly farther than the current best, so equal-distance
//! candidates are always visited.

use crate::error::{Error, Result};
use crate::scalar::{dist2, Scalar, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Vec3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> KdTree<T> {
    pub fn build(points: &[Vec3<T>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet("reference points"));
        }
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        tree.build_node(0, points.len());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of largest spread
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                (hi[a] - lo[a])
                    .partial_cmp(&(hi[b] - lo[b]))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        if !(hi[axis] > lo[axis]) {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis]
                .partial_cmp(&pts[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
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

    /// Index and squared distance of the nearest reference point.
    pub fn nearest(&self, q: &Vec3<T>) -> (usize, T) {
        let mut best = (usize::MAX, T::infinity());
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vec3<T>, best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right holds >= value
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                if !(diff * diff > best.1) {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Exact nearest reference index for every query point.
pub fn nearest_neighbor_index<T: Scalar>(
    queries: &[Vec3<T>],
    reference: &[Vec3<T>],
) -> Result<Vec<usize>> {
    let tree = KdTree::build(reference)?;
    Ok(queries.iter().map(|q| tree.nearest(q).0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_reference() {
        let idx = nearest_neighbor_index(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert_eq!(idx, vec![0, 0]);
    }

    #[test]
    fn query_on_reference_point() {
        let refs: Vec<Vec3<f64>> = (0..50).map(|i| [i as f64, (i * 7 % 11) as f64, 0.5]).collect();
        let idx = nearest_neighbor_index(&[refs[17]], &refs).unwrap();
        assert_eq!(idx, vec![17]);
    }

    #[test]
    fn empty_reference_is_error() {
        assert!(nearest_neighbor_index::<f64>(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        // many duplicates straddling split planes
        let mut refs = Vec::new();
        for i in 0..40 {
            refs.push([(i % 4) as f64, 0.0, 0.0]);
        }
        let idx = nearest_neighbor_index(&[[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]], &refs).unwrap();
        assert_eq!(idx, vec![0, 2]);
    }
}
