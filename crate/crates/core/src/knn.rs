//! Directed k-nearest-neighbor graphs over predictor rows.
//!
//! Node `i` points to the `k` rows closest to row `i` in Euclidean distance,
//! itself excluded. Equal distances are resolved toward the smaller index, so
//! the graph is a deterministic function of the input. Small inputs are
//! searched exhaustively; larger ones go through an exact kd-tree. Both paths
//! order candidates by the same `(squared distance, index)` key computed by the
//! same arithmetic, so they always agree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{squared_euclidean, Matrix};

pub const DEFAULT_BRUTE_FORCE_THRESHOLD: usize = 256;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    /// Exhaustive search up to `threshold` points, kd-tree above.
    Auto { threshold: usize },
    BruteForce,
    KdTree,
}

impl Default for SearchStrategy {
    fn default() -> Self {
        SearchStrategy::Auto {
            threshold: DEFAULT_BRUTE_FORCE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    n: usize,
    dim: usize,
    // row-major n x k
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn build(points: &Matrix, k: usize) -> Result<Self> {
        Self::build_with(points, k, SearchStrategy::default())
    }

    pub fn build_with(points: &Matrix, k: usize, strategy: SearchStrategy) -> Result<Self> {
        let n = points.rows();
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "k-NN graph needs at least 2 points, got {n}"
            )));
        }
        if k == 0 || k >= n {
            return Err(Error::InvalidParameter(format!(
                "k must satisfy 1 <= k <= n-1 (k = {k}, n = {n})"
            )));
        }
        if points.cols() == 0 {
            return Err(Error::DimensionMismatch("predictor rows have no columns".into()));
        }
        if let Some(pos) = points.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "predictor row {} column {}",
                pos / points.cols(),
                pos % points.cols()
            )));
        }
        let use_tree = match strategy {
            SearchStrategy::Auto { threshold } => n > threshold,
            SearchStrategy::BruteForce => false,
            SearchStrategy::KdTree => true,
        };
        let lists: Vec<Vec<usize>> = if use_tree {
            let tree = KdTree::new(points);
            // Query in tree order so consecutive queries touch the same leaves.
            let by_position: Vec<Vec<usize>> = (0..n).into_par_iter().map(|pos| tree.query(pos, k)).collect();
            let mut lists = vec![Vec::new(); n];
            for (pos, list) in by_position.into_iter().enumerate() {
                lists[tree.order[pos]] = list;
            }
            lists
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| brute_force_query(points, i, k))
                .collect()
        };
        Ok(Self {
            k,
            n,
            dim: points.cols(),
            neighbors: lists.into_iter().flatten().collect(),
        })
    }

    /// Wraps explicit out-neighbor lists, checking the graph invariants.
    pub fn from_neighbor_lists(lists: &[Vec<usize>], dim: usize) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        if n < 2 || k == 0 || k >= n {
            return Err(Error::InvalidParameter(format!(
                "invalid graph shape n = {n}, k = {k}"
            )));
        }
        for (i, l) in lists.iter().enumerate() {
            if l.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "node {i} has {} neighbors, expected {k}",
                    l.len()
                )));
            }
            for &j in l {
                if j >= n {
                    return Err(Error::IndexOutOfRange { index: j, len: n });
                }
                if j == i {
                    return Err(Error::InvalidParameter(format!("node {i} lists itself")));
                }
            }
        }
        Ok(Self {
            k,
            n,
            dim,
            neighbors: lists.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn built_from_dim(&self) -> usize {
        self.dim
    }

    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n,
            });
        }
        Ok(self.neighbors_unchecked(i))
    }

    #[inline]
    pub fn neighbors_unchecked(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Iterates all directed edges `(i, j)` in node order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.neighbors_unchecked(i).iter().map(move |&j| (i, j)))
    }

    /// In-degree plus out-degree of every node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![self.k; self.n];
        for &j in &self.neighbors {
            deg[j] += 1;
        }
        deg
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

fn brute_force_query(points: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let q = points.row(i);
    let mut cands: Vec<Candidate> = (0..points.rows())
        .filter(|&j| j != i)
        .map(|j| Candidate {
            dist2: squared_euclidean(q, points.row(j)),
            index: j,
        })
        .collect();
    if k < cands.len() {
        cands.select_nth_unstable(k - 1);
        cands.truncate(k);
    }
    cands.sort_unstable();
    cands.into_iter().map(|c| c.index).collect()
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

struct KdTree<'a> {
    points: &'a Matrix,
    /// Original row index of each tree position.
    order: Vec<usize>,
    /// Coordinates laid out in tree order, so each leaf is one contiguous block.
    coords: Vec<f64>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a Matrix) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.rows()).collect(),
            coords: Vec::new(),
            nodes: Vec::new(),
        };
        tree.build_node(0, points.rows());
        tree.coords = tree.order.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points.get(a, dim).total_cmp(&points.get(b, dim))
        });
        let value = points.get(self.order[mid], dim);
        self.nodes.push(Node::Leaf { start, end }); // placeholder
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let d = self.points.cols();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.points.get(i, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (c, hi - lo);
            }
        }
        best.0
    }

    fn coords_at(&self, pos: usize) -> &[f64] {
        let d = self.points.cols();
        &self.coords[pos * d..(pos + 1) * d]
    }

    /// Neighbors of the point at tree position `pos`, as original indices.
    fn query(&self, pos: usize, k: usize) -> Vec<usize> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.coords_at(pos), self.order[pos], k, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: usize, q: &[f64], i: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for pos in start..end {
                    let j = self.order[pos];
                    if j == i {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: squared_euclidean(q, self.coords_at(pos)),
                        index: j,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                // points equal to the split value may sit on either side
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, i, k, heap);
                let plane2 = diff * diff;
                // `<=` keeps equal-distance candidates with smaller indices reachable
                if heap.len() < k || plane2 <= heap.peek().map_or(f64::INFINITY, |c| c.dist2) {
                    self.search(far, q, i, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn line(xs: &[f64]) -> Matrix {
        Matrix::column(xs)
    }

    #[test]
    fn one_dimensional_example() {
        let g = KnnGraph::build(&line(&[0.0, 1.0, 3.0, 7.0]), 1).unwrap();
        let lists: Vec<_> = (0..4).map(|i| g.neighbors(i).unwrap().to_vec()).collect();
        assert_eq!(lists, vec![vec![1], vec![0], vec![1], vec![2]]);
        assert_eq!(g.neighbors(2).unwrap(), &[1]);
        assert_eq!(g.degrees(), vec![2, 3, 2, 1]);
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        let g = KnnGraph::build(&line(&[0.0, 0.0, 5.0]), 1).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
        assert_eq!(g.neighbors(1).unwrap(), &[0]);
        assert_eq!(g.neighbors(2).unwrap(), &[0]);
    }

    #[test]
    fn complete_graph_when_k_is_n_minus_one() {
        let n = 6;
        let pts = line(&[0.5, -1.0, 2.0, 3.5, 0.1, 9.0]);
        let g = KnnGraph::build(&pts, n - 1).unwrap();
        for i in 0..n {
            let mut l = g.neighbors(i).unwrap().to_vec();
            l.sort_unstable();
            let expected: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            assert_eq!(l, expected);
        }
        assert!(g.degrees().iter().all(|&d| d == 2 * (n - 1)));
    }

    #[test]
    fn invalid_requests() {
        let pts = line(&[0.0, 1.0, 2.0]);
        assert!(KnnGraph::build(&pts, 0).is_err());
        assert!(KnnGraph::build(&pts, 3).is_err());
        assert!(KnnGraph::build(&line(&[1.0]), 1).is_err());
        assert!(matches!(
            KnnGraph::build(&line(&[0.0, f64::NAN, 1.0]), 1),
            Err(Error::NonFinite(_))
        ));
        let g = KnnGraph::build(&pts, 1).unwrap();
        assert!(matches!(
            g.neighbors(3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn neighbor_lists_are_valid() {
        let mut rng = SeededRng::new(11);
        let pts = Matrix::from_fn(300, 3, |_, _| rng.standard_normal());
        for k in [1, 4, 17] {
            let g = KnnGraph::build(&pts, k).unwrap();
            for i in 0..g.n() {
                let l = g.neighbors(i).unwrap();
                assert_eq!(l.len(), k);
                assert!(!l.contains(&i));
                assert!(l.iter().all(|&j| j < g.n()));
            }
            assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.n() * k);
        }
    }

    #[test]
    fn kd_tree_matches_brute_force_with_heavy_ties() {
        // integer grid: many equal distances
        let mut rng = SeededRng::new(5);
        let pts = Matrix::from_fn(400, 2, |_, _| rng.below(6) as f64);
        for k in [1, 3, 10, 50] {
            let a = KnnGraph::build_with(&pts, k, SearchStrategy::BruteForce).unwrap();
            let b = KnnGraph::build_with(&pts, k, SearchStrategy::KdTree).unwrap();
            assert_eq!(a, b, "k = {k}");
        }
    }

    #[test]
    fn from_lists_validates() {
        assert!(KnnGraph::from_neighbor_lists(&[vec![1], vec![0]], 1).is_ok());
        assert!(KnnGraph::from_neighbor_lists(&[vec![0], vec![0]], 1).is_err());
        assert!(KnnGraph::from_neighbor_lists(&[vec![2], vec![0]], 1).is_err());
        assert!(KnnGraph::from_neighbor_lists(&[vec![1], vec![]], 1).is_err());
    }
}
