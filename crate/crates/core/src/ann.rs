//! Exact and approximate Euclidean nearest-neighbor search.
//!
//! The approximate index is a forest of randomized kd-trees searched with a
//! shared priority queue and a bounded number of distance evaluations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split dimension is drawn from this many highest-variance dimensions.
const TOP_VARIANCE_DIMS: usize = 5;
/// Points used to estimate per-node variance.
const VARIANCE_SAMPLE: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnParams {
    pub trees: usize,
    /// Maximum number of distance evaluations per query.
    pub checks: usize,
    pub leaf_size: usize,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            trees: 8,
            checks: 6144,
            leaf_size: 32,
            seed: 0,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.checks == 0 || self.leaf_size == 0 {
            return Err(Error::InvalidParameter(
                "ann trees, checks and leaf_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Split {
        dim: u32,
        value: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        end: u32,
    },
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Randomized kd-tree forest over a flat `n × dim` row-major point set.
/// The points are passed to every query rather than owned.
#[derive(Clone, Debug)]
pub struct KdForest {
    dim: usize,
    len: usize,
    trees: Vec<Tree>,
    params: AnnParams,
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += (x - y) * (x - y);
    }
    s
}

/// Candidate ordered by distance, then index, so results are deterministic.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    dist: f32,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Cand>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> f32 {
        if self.heap.len() < self.k {
            f32::INFINITY
        } else {
            self.heap.peek().map_or(f32::INFINITY, |c| c.dist)
        }
    }

    fn push(&mut self, c: Cand) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if c < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    fn into_sorted(self) -> Vec<(usize, f32)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.idx as usize, c.dist.sqrt()))
            .collect()
    }
}

/// Exact k nearest neighbors by linear scan: `(index, distance)` ascending.
pub fn brute_force_knn(data: &[f32], dim: usize, query: &[f32], k: usize) -> Vec<(usize, f32)> {
    assert_eq!(query.len(), dim, "query dimension");
    let mut top = TopK::new(k);
    if k == 0 {
        return Vec::new();
    }
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let d = squared_distance(row, query);
        if d <= top.worst() {
            top.push(Cand {
                dist: d,
                idx: i as u32,
            });
        }
    }
    top.into_sorted()
}

/// Branch to revisit: lower bound on distance and node location.
#[derive(Clone, Copy, PartialEq)]
struct Branch {
    bound: f32,
    tree: u32,
    node: u32,
}

impl Eq for Branch {}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on bound.
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdForest {
    pub fn build(data: &[f32], dim: usize, params: &AnnParams) -> Result<Self> {
        params.validate()?;
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        let len = data.len() / dim;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.trees)
            .map(|_| {
                let mut order: Vec<u32> = (0..len as u32).collect();
                let mut nodes = Vec::new();
                if len > 0 {
                    build_node(
                        data,
                        dim,
                        &mut order,
                        0,
                        params.leaf_size,
                        &mut nodes,
                        &mut rng,
                    );
                }
                Tree { nodes, order }
            })
            .collect();
        Ok(Self {
            dim,
            len,
            trees,
            params: params.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    /// Approximate k nearest neighbors with the configured check budget.
    pub fn knn(&self, data: &[f32], query: &[f32], k: usize) -> Vec<(usize, f32)> {
        self.knn_with_checks(data, query, k, self.params.checks)
    }

    pub fn knn_with_checks(
        &self,
        data: &[f32],
        query: &[f32],
        k: usize,
        checks: usize,
    ) -> Vec<(usize, f32)> {
        assert_eq!(query.len(), self.dim, "query dimension");
        assert_eq!(
            data.len(),
            self.len * self.dim,
            "index built over different data"
        );
        if k == 0 || self.len == 0 {
            return Vec::new();
        }
        let mut top = TopK::new(k);
        let mut seen = vec![0u64; self.len.div_ceil(64)];
        let mut heap = BinaryHeap::new();
        let mut checked = 0usize;
        for t in 0..self.trees.len() {
            self.descend(
                data,
                query,
                t,
                0,
                0.0,
                &mut top,
                &mut seen,
                &mut heap,
                &mut checked,
            );
        }
        while let Some(b) = heap.pop() {
            if checked >= checks && top.heap.len() >= k {
                break;
            }
            if b.bound > top.worst() {
                break;
            }
            self.descend(
                data,
                query,
                b.tree as usize,
                b.node as usize,
                b.bound,
                &mut top,
                &mut seen,
                &mut heap,
                &mut checked,
            );
        }
        top.into_sorted()
    }

    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        data: &[f32],
        query: &[f32],
        t: usize,
        mut node: usize,
        bound: f32,
        top: &mut TopK,
        seen: &mut [u64],
        heap: &mut BinaryHeap<Branch>,
        checked: &mut usize,
    ) {
        let tree = &self.trees[t];
        loop {
            match tree.nodes[node] {
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    let diff = query[dim as usize] - value;
                    let (near, far) = if diff < 0.0 {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    let far_bound = bound + diff * diff;
                    if far_bound <= top.worst() {
                        heap.push(Branch {
                            bound: far_bound,
                            tree: t as u32,
                            node: far,
                        });
                    }
                    node = near as usize;
                }
                Node::Leaf { start, end } => {
                    for &i in &tree.order[start as usize..end as usize] {
                        let (w, bit) = (i as usize / 64, 1u64 << (i % 64));
                        if seen[w] & bit != 0 {
                            continue;
                        }
                        seen[w] |= bit;
                        *checked += 1;
                        let row = &data[i as usize * self.dim..(i as usize + 1) * self.dim];
                        let d = squared_distance(row, query);
                        if d <= top.worst() {
                            top.push(Cand { dist: d, idx: i });
                        }
                    }
                    return;
                }
            }
        }
    }
}

fn build_node(
    data: &[f32],
    dim: usize,
    order: &mut [u32],
    offset: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let id = nodes.len() as u32;
    let leaf = Node::Leaf {
        start: offset as u32,
        end: (offset + order.len()) as u32,
    };
    if order.len() <= leaf_size {
        nodes.push(leaf);
        return id;
    }
    let sample: Vec<u32> = if order.len() > VARIANCE_SAMPLE {
        order
            .choose_multiple(rng, VARIANCE_SAMPLE)
            .copied()
            .collect()
    } else {
        order.to_vec()
    };
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for &i in &sample {
        for (j, &v) in data[i as usize * dim..(i as usize + 1) * dim]
            .iter()
            .enumerate()
        {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let n = sample.len() as f64;
    let mut by_var: Vec<(f64, usize)> = (0..dim)
        .map(|j| {
            let m = mean[j] / n;
            (sq[j] / n - m * m, j)
        })
        .collect();
    by_var.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let pick = by_var[..TOP_VARIANCE_DIMS.min(dim)].choose(rng).unwrap().1;
    let mut value = (mean[pick] / n) as f32;

    let key = |i: u32| data[i as usize * dim + pick];
    let mut mid = partition(order, |i| key(i) < value);
    if mid == 0 || mid == order.len() {
        // Degenerate mean split: fall back to the median.
        let half = order.len() / 2;
        order.select_nth_unstable_by(half, |&a, &b| key(a).total_cmp(&key(b)));
        value = key(order[half]);
        mid = partition(order, |i| key(i) < value);
        if mid == 0 {
            nodes.push(leaf);
            return id;
        }
    }
    nodes.push(leaf);
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(data, dim, lo, offset, leaf_size, nodes, rng);
    let right = build_node(data, dim, hi, offset + mid, leaf_size, nodes, rng);
    nodes[id as usize] = Node::Split {
        dim: pick as u32,
        value,
        left,
        right,
    };
    id
}

/// Moves elements satisfying `pred` to the front; returns their count.
fn partition(v: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut k = 0;
    for i in 0..v.len() {
        if pred(v[i]) {
            v.swap(i, k);
            k += 1;
        }
    }
    k
}
