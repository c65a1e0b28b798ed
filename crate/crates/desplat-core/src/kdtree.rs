//! Minimal kd-tree for k-nearest-neighbor queries over primitive means.

use crate::math::Vec3;
use alloc::collections::BinaryHeap;
use alloc::vec::Vec;

#[inline]
pub(crate) fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = a - b;
    d.dot(d)
}

struct Node {
    point: Vec3,
    index: u32,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

pub(crate) struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

/// Max-heap entry ordered by distance; ties break on index so the retained
/// neighbor set is deterministic.
#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    index: u32,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub(crate) fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut order[..], 0, &mut nodes);
        Self { nodes, root }
    }

    fn build_rec(
        points: &[Vec3],
        order: &mut [u32],
        depth: u8,
        nodes: &mut Vec<Node>,
    ) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let axis = depth % 3;
        // Median split; ties broken by index keep the build deterministic.
        order.sort_unstable_by(|&a, &b| {
            points[a as usize]
                .get(axis as usize)
                .total_cmp(&points[b as usize].get(axis as usize))
                .then(a.cmp(&b))
        });
        let mid = order.len() / 2;
        let index = order[mid];
        let slot = nodes.len();
        nodes.push(Node {
            point: points[index as usize],
            index,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, hi, depth + 1, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        Some(slot)
    }

    /// Squared distances of the `k` nearest neighbors to `query`, excluding
    /// the point with index `exclude`, sorted ascending.
    pub(crate) fn k_nearest_dist2(&self, query: Vec3, exclude: u32, k: usize) -> Vec<f64> {
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        if let Some(root) = self.root {
            self.search(root, query, exclude, k, &mut heap);
        }
        let mut out: Vec<f64> = heap.into_iter().map(|e| e.dist).collect();
        out.sort_unstable_by(f64::total_cmp);
        out
    }

    fn search(
        &self,
        node_idx: usize,
        query: Vec3,
        exclude: u32,
        k: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        let node = &self.nodes[node_idx];
        if node.index != exclude {
            let d = dist2(query, node.point);
            if heap.len() < k {
                heap.push(HeapEntry {
                    dist: d,
                    index: node.index,
                });
            } else if let Some(top) = heap.peek() {
                if d < top.dist || (d == top.dist && node.index < top.index) {
                    heap.pop();
                    heap.push(HeapEntry {
                        dist: d,
                        index: node.index,
                    });
                }
            }
        }

        let axis = node.axis as usize;
        let delta = query.get(axis) - node.point.get(axis);
        let (near, far) = if delta <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, query, exclude, k, heap);
        }
        let need_far = heap.len() < k
            || heap
                .peek()
                .map(|top| delta * delta <= top.dist)
                .unwrap_or(true);
        if need_far {
            if let Some(f) = far {
                self.search(f, query, exclude, k, heap);
            }
        }
    }
}
