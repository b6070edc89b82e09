//! Exact k-nearest-neighbor search.
//!
//! Neighbors are ordered by `(squared distance, index)`, so ties resolve to
//! the lowest point index and every query has exactly one correct answer.
//! Clouds up to [`BRUTE_FORCE_MAX`] points are scanned directly; larger ones
//! go through a median-split kd-tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Clouds with at most this many points skip the tree.
pub const BRUTE_FORCE_MAX: usize = 128;

const LEAF_SIZE: usize = 8;

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` smallest candidates seen so far.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.heap.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.heap.peek().map_or(f64::INFINITY, |c| c.d2)
    }

    fn offer(&mut self, c: Candidate) {
        if !self.full() {
            self.heap.push(c);
        } else if c < *self.heap.peek().expect("k >= 1") {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

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

/// Static kd-tree over a borrowed point slice.
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = self.points[slice[0]];
        let mut hi = lo;
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = points[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query` (ascending), skipping `exclude`.
    /// Returns `(index, squared distance)` pairs.
    pub fn knn(&self, query: &Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best = Best::new(k);
        self.search(0, query, exclude, &mut best);
        best.into_sorted()
            .into_iter()
            .map(|c| (c.index, c.d2))
            .collect()
    }

    pub fn nearest(&self, query: &Point3, exclude: Option<usize>) -> Option<(usize, f64)> {
        self.knn(query, 1, exclude).into_iter().next()
    }

    fn search(&self, node: usize, query: &Point3, exclude: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) != exclude {
                        best.offer(Candidate {
                            d2: dist2(query, &self.points[i]),
                            index: i,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, exclude, best);
                // `<=` keeps equal-distance candidates with a lower index reachable.
                if !best.full() || diff * diff <= best.worst() {
                    self.search(far, query, exclude, best);
                }
            }
        }
    }
}

fn brute_force_knn(points: &[Point3], query: usize, k: usize) -> Vec<(usize, f64)> {
    let mut best = Best::new(k);
    let q = &points[query];
    for (i, p) in points.iter().enumerate() {
        if i != query {
            best.offer(Candidate {
                d2: dist2(q, p),
                index: i,
            });
        }
    }
    best.into_sorted()
        .into_iter()
        .map(|c| (c.index, c.d2))
        .collect()
}

/// For each point of a cloud, its `k` nearest other points, nearest first.
///
/// The index records the size of the cloud it was built over; it does not
/// hold a reference to it.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    k: usize,
    n: usize,
    neighbors: Vec<usize>,
    dist2: Vec<f64>,
}

impl NeighborhoodIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of points of the indexed cloud.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Squared distances matching [`row`](Self::row).
    pub fn row_dist2(&self, i: usize) -> &[f64] {
        &self.dist2[i * self.k..(i + 1) * self.k]
    }

    pub fn nearest(&self, i: usize) -> usize {
        self.neighbors[i * self.k]
    }

    /// Same neighbor sets, with the order inside row `i` replaced. Only the
    /// order may change; used to check order-invariance of consumers.
    pub fn with_row_order(&self, i: usize, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        let mut current = self.row(i).to_vec();
        current.sort_unstable();
        if sorted != current {
            return Err(Error::Contract("row permutation changes the neighbor set".into()));
        }
        let mut out = self.clone();
        for (slot, &j) in order.iter().enumerate() {
            let pos = self.row(i).iter().position(|&x| x == j).expect("checked");
            out.neighbors[i * self.k + slot] = j;
            out.dist2[i * self.k + slot] = self.row_dist2(i)[pos];
        }
        Ok(out)
    }
}

pub fn build_neighborhood_index(cloud: &PointCloud, k: usize) -> Result<NeighborhoodIndex> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::Size("neighborhood size K must be positive".into()));
    }
    if n < k + 1 {
        return Err(Error::Size(format!(
            "cloud of {n} points is too small for K = {k} (needs at least {})",
            k + 1
        )));
    }
    let points = cloud.points();
    let tree = (n > BRUTE_FORCE_MAX).then(|| KdTree::build(points));
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| match &tree {
            Some(tree) => tree.knn(&points[i], k, Some(i)),
            None => brute_force_knn(points, i, k),
        })
        .collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut dist2 = Vec::with_capacity(n * k);
    for row in rows {
        for (j, d) in row {
            neighbors.push(j);
            dist2.push(d);
        }
    }
    Ok(NeighborhoodIndex {
        k,
        n,
        neighbors,
        dist2,
    })
}

/// Replaces every point with its nearest other point of the same cloud.
pub fn one_nn_cloud(cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<PointCloud> {
    if index.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "index built over {} points used with a cloud of {}",
            index.len(),
            cloud.len()
        )));
    }
    PointCloud::new(
        (0..cloud.len())
            .map(|i| *cloud.point(index.nearest(i)))
            .collect(),
    )
}
