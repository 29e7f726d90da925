//! Axis-aligned recursive partitions grown with a constrained CART rule.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::data::ForestConfig;

/// One internal or terminal record of the tree.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split { feature: usize, threshold: f64, left: u32, right: u32 },
    Leaf { leaf: u32 },
}

/// Cell `(lo, hi]` of a leaf; outer faces are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCell {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Split-sample rows in the cell.
    pub count: usize,
    /// No admissible split existed although the cell holds at least `2k`
    /// rows, or the root alone held fewer than `k`.
    pub saturated: bool,
    /// Number of splits on each feature along the root-to-leaf path.
    pub path_splits: Vec<u32>,
}

impl LeafCell {
    pub fn depth(&self) -> u32 {
        self.path_splits.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// Decrease of the within-node sum of squares.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(from = "RawPartition", into = "RawPartition"))]
pub struct TreePartition {
    dim: usize,
    nodes: Vec<Node>,
    leaves: Vec<LeafCell>,
    parent: Vec<u32>,
    leaf_node: Vec<u32>,
    leaf_range: Vec<(u32, u32)>,
}

/// Serialised form: boxes and path counts are recomputed on load because
/// JSON cannot carry infinities.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct RawPartition {
    dim: usize,
    nodes: Vec<Node>,
    counts: Vec<usize>,
    saturated: Vec<bool>,
}

impl From<RawPartition> for TreePartition {
    fn from(raw: RawPartition) -> Self {
        let mut p = TreePartition::from_nodes(raw.dim, raw.nodes);
        for (leaf, (&count, &saturated)) in p.leaves.iter_mut().zip(raw.counts.iter().zip(&raw.saturated)) {
            leaf.count = count;
            leaf.saturated = saturated;
        }
        p
    }
}

impl From<TreePartition> for RawPartition {
    fn from(p: TreePartition) -> Self {
        RawPartition {
            dim: p.dim,
            counts: p.leaves.iter().map(|l| l.count).collect(),
            saturated: p.leaves.iter().map(|l| l.saturated).collect(),
            nodes: p.nodes,
        }
    }
}

const ROOT: u32 = 0;
const NO_PARENT: u32 = u32::MAX;

impl TreePartition {
    /// Rebuilds cells and bookkeeping from the node table. Leaf ids must
    /// follow depth-first, left-before-right order.
    fn from_nodes(dim: usize, nodes: Vec<Node>) -> Self {
        let n_leaves = nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count();
        let empty = LeafCell {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
            count: 0,
            saturated: false,
            path_splits: vec![0; dim],
        };
        let mut leaves = vec![empty.clone(); n_leaves];
        let mut parent = vec![NO_PARENT; nodes.len()];
        let mut leaf_node = vec![0; n_leaves];
        let mut leaf_range = vec![(0, 0); nodes.len()];
        // a `None` cell marks the second visit, which closes the leaf range
        let mut stack = vec![(ROOT, Some(empty))];
        let mut next_leaf = 0u32;
        while let Some((id, cell)) = stack.pop() {
            let idx = id as usize;
            let Some(cell) = cell else {
                leaf_range[idx].1 = next_leaf;
                continue;
            };
            leaf_range[idx].0 = next_leaf;
            match nodes[idx] {
                Node::Leaf { leaf } => {
                    debug_assert_eq!(leaf, next_leaf);
                    leaf_node[leaf as usize] = id;
                    leaves[leaf as usize] = cell;
                    next_leaf += 1;
                    leaf_range[idx].1 = next_leaf;
                }
                Node::Split { feature, threshold, left, right } => {
                    parent[left as usize] = id;
                    parent[right as usize] = id;
                    let mut lcell = cell.clone();
                    lcell.hi[feature] = threshold;
                    lcell.path_splits[feature] += 1;
                    let mut rcell = cell;
                    rcell.lo[feature] = threshold;
                    rcell.path_splits[feature] += 1;
                    stack.push((id, None));
                    stack.push((right, Some(rcell)));
                    stack.push((left, Some(lcell)));
                }
            }
        }
        TreePartition { dim, nodes, leaves, parent, leaf_node, leaf_range }
    }

    /// A chain of splits, each nested in the right child of the previous one.
    /// Intended for tests and hand-built partitions.
    pub fn from_splits(dim: usize, splits: &[(usize, f64)]) -> Self {
        let mut nodes = Vec::with_capacity(2 * splits.len() + 1);
        let mut leaf = 0;
        for &(feature, threshold) in splits {
            let id = nodes.len() as u32;
            nodes.push(Node::Split { feature, threshold, left: id + 1, right: id + 2 });
            nodes.push(Node::Leaf { leaf });
            leaf += 1;
        }
        nodes.push(Node::Leaf { leaf });
        Self::from_nodes(dim, nodes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[LeafCell] {
        &self.leaves
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn counts(&self) -> Vec<usize> {
        self.leaves.iter().map(|l| l.count).collect()
    }

    /// Leaf id `J(x)`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut id = ROOT as usize;
        loop {
            match self.nodes[id] {
                Node::Leaf { leaf } => return leaf as usize,
                Node::Split { feature, threshold, left, right } => {
                    id = if x[feature] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    /// Leaf ids for every row of a row-major matrix.
    pub fn leaf_indices(&self, x: &[f64]) -> Vec<u32> {
        x.chunks_exact(self.dim).map(|row| self.leaf_index(row) as u32).collect()
    }

    /// Leaf ids of the smallest strict ancestor subtrees of leaf `m`, from the
    /// nearest outward.
    pub fn ancestor_ranges(&self, m: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        let mut node = self.parent[self.leaf_node[m] as usize];
        core::iter::from_fn(move || {
            if node == NO_PARENT {
                return None;
            }
            let (a, b) = self.leaf_range[node as usize];
            node = self.parent[node as usize];
            Some(a as usize..b as usize)
        })
    }
}

/// Best admissible cut of one feature at a node.
///
/// Thresholds are midpoints between consecutive distinct values. A cut is
/// admissible when both children hold at least `k` rows and at least an
/// `alpha_split` fraction of the node. Near-ties keep the smaller threshold.
pub fn best_split(
    feature: usize,
    values: &[f64],
    y: &[f64],
    k: usize,
    alpha_split: f64,
) -> Option<SplitCandidate> {
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sse: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    scan_sorted(feature, &pairs, mean, tie_tolerance(sse), k, alpha_split)
}

fn tie_tolerance(sse: f64) -> f64 {
    1e-12 * sse.max(1.0)
}

fn scan_sorted(
    feature: usize,
    pairs: &[(f64, f64)],
    mean: f64,
    tol: f64,
    k: usize,
    alpha_split: f64,
) -> Option<SplitCandidate> {
    let n = pairs.len();
    let min_side = k.max(1) as f64;
    let min_frac = alpha_split * n as f64 - 1e-9;
    let mut best: Option<SplitCandidate> = None;
    let mut left_sum = 0.0;
    for l in 1..n {
        left_sum += pairs[l - 1].1 - mean;
        let (xa, xb) = (pairs[l - 1].0, pairs[l].0);
        if xa == xb {
            continue;
        }
        let (lf, rf) = (l as f64, (n - l) as f64);
        if lf < min_side || rf < min_side || lf < min_frac || rf < min_frac {
            continue;
        }
        // SSE decrease with parent-centred sums: S_L^2 (1/n_L + 1/n_R)
        let gain = left_sum * left_sum * (1.0 / lf + 1.0 / rf);
        if best.is_none_or(|b| gain > b.gain + tol) {
            best = Some(SplitCandidate { feature, threshold: xa + (xb - xa) / 2.0, gain });
        }
    }
    best
}

struct Pending {
    node: u32,
    rows: Vec<u32>,
    path: Vec<u32>,
}

/// Grows a partition on the split sample `x` (row-major, `d` columns).
///
/// A node of at least `2k` rows is split on the CART-best admissible cut. When
/// some feature's share of the splits on the path is below `pi_frac / d`, the
/// most deficient feature (lowest index on ties) is tried alone first. `rng`
/// only draws the feature subset when `cfg.mtry` is set.
pub fn fit_partition<R: Rng + ?Sized>(
    x: &[f64],
    y: &[f64],
    d: usize,
    cfg: &ForestConfig,
    rng: &mut R,
) -> TreePartition {
    assert!(d > 0 && x.len() == y.len() * d, "split sample shape");
    let k = cfg.k.max(1);
    let target_share = cfg.pi_frac / d as f64;
    let mut nodes = vec![Node::Leaf { leaf: 0 }];
    let mut leaf_info: Vec<(usize, bool)> = Vec::new();
    let mut stack = vec![Pending { node: ROOT, rows: (0..y.len() as u32).collect(), path: vec![0; d] }];
    let mut pairs = Vec::new();
    let mut features: Vec<usize> = (0..d).collect();

    while let Some(Pending { node, rows, path }) = stack.pop() {
        let n = rows.len();
        let mut chosen = None;
        if n >= 2 * k {
            let mean = rows.iter().map(|&r| y[r as usize]).sum::<f64>() / n as f64;
            let sse: f64 = rows.iter().map(|&r| (y[r as usize] - mean) * (y[r as usize] - mean)).sum();
            let tol = tie_tolerance(sse);
            let search = |feats: &[usize], pairs: &mut Vec<(f64, f64)>| {
                let mut best: Option<SplitCandidate> = None;
                for &f in feats {
                    pairs.clear();
                    pairs.extend(rows.iter().map(|&r| (x[r as usize * d + f], y[r as usize])));
                    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                    if let Some(c) = scan_sorted(f, pairs, mean, tol, k, cfg.alpha_split) {
                        if best.is_none_or(|b| c.gain > b.gain + tol) {
                            best = Some(c);
                        }
                    }
                }
                best
            };
            let depth: u32 = path.iter().sum();
            let forced = if depth > 0 {
                (0..d)
                    .filter(|&f| (path[f] as f64) < target_share * depth as f64)
                    .min_by_key(|&f| (path[f], f))
            } else {
                None
            };
            if let Some(f) = forced {
                chosen = search(&[f], &mut pairs);
            }
            if chosen.is_none() {
                let feats: &[usize] = match cfg.mtry {
                    Some(m) if m < d => {
                        for i in 0..m {
                            let j = rng.random_range(i..d);
                            features.swap(i, j);
                        }
                        features[..m].sort_unstable();
                        &features[..m]
                    }
                    _ => {
                        features.sort_unstable();
                        &features
                    }
                };
                chosen = search(feats, &mut pairs);
            }
        }
        match chosen {
            Some(c) => {
                let left = nodes.len() as u32;
                nodes.push(Node::Leaf { leaf: 0 });
                nodes.push(Node::Leaf { leaf: 0 });
                nodes[node as usize] =
                    Node::Split { feature: c.feature, threshold: c.threshold, left, right: left + 1 };
                let (lrows, rrows): (Vec<u32>, Vec<u32>) =
                    rows.iter().partition(|&&r| x[r as usize * d + c.feature] <= c.threshold);
                let mut child_path = path;
                child_path[c.feature] += 1;
                stack.push(Pending { node: left + 1, rows: rrows, path: child_path.clone() });
                stack.push(Pending { node: left, rows: lrows, path: child_path });
            }
            None => {
                nodes[node as usize] = Node::Leaf { leaf: leaf_info.len() as u32 };
                leaf_info.push((n, n >= 2 * k || n < k));
            }
        }
    }
    let mut p = TreePartition::from_nodes(d, nodes);
    for (leaf, (count, saturated)) in p.leaves.iter_mut().zip(leaf_info) {
        leaf.count = count;
        leaf.saturated = saturated;
    }
    p
}
