//! Leaf-membership designs and the weighted normal equations `(Σ χᵀWχ) γ = rhs`.
//!
//! Everything here works on the sparse membership form: a design is just the
//! leaf id of every row, grouped by cluster. A product with `Σ χᵢᵀ Wᵢ χᵢ` is a
//! gather, an O(nᵢ) weight product per cluster, and a scatter.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::partition::TreePartition;
use crate::weights::{dominance_margin, norm_one, weight_matvec, WeightClass, WeightSpec};

/// Leaf ids of the rows of a set of clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignAssembly {
    leaf_rows: Vec<u32>,
    offsets: Vec<usize>,
    counts: Vec<usize>,
}

impl DesignAssembly {
    /// Builds a design from per-cluster leaf-id sequences.
    pub fn from_clusters<'a>(n_leaves: usize, clusters: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut leaf_rows = Vec::new();
        let mut offsets = vec![0];
        let mut counts = vec![0; n_leaves];
        for rows in clusters {
            for &l in rows {
                counts[l as usize] += 1;
            }
            leaf_rows.extend_from_slice(rows);
            offsets.push(leaf_rows.len());
        }
        DesignAssembly { leaf_rows, offsets, counts }
    }

    pub fn n_leaves(&self) -> usize {
        self.counts.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        self.leaf_rows.len()
    }

    /// Rows per leaf, `v_m`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Leaf ids of the rows of cluster `i`.
    pub fn cluster(&self, i: usize) -> &[u32] {
        &self.leaf_rows[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn cluster_range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn empty_leaves(&self) -> Vec<usize> {
        (0..self.n_leaves()).filter(|&m| self.counts[m] == 0).collect()
    }

    fn max_cluster_len(&self) -> usize {
        (0..self.n_clusters()).map(|i| self.offsets[i + 1] - self.offsets[i]).max().unwrap_or(0)
    }

    fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = (0..self.n_clusters()).map(|i| self.offsets[i + 1] - self.offsets[i]).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }
}

/// Routes every row of the listed clusters through `partition`.
pub fn assemble_design(partition: &TreePartition, ds: &ClusteredDataset, ids: &[usize]) -> DesignAssembly {
    let per_cluster: Vec<Vec<u32>> = ids.iter().map(|&i| partition.leaf_indices(&ds.cluster(i).x)).collect();
    DesignAssembly::from_clusters(partition.n_leaves(), per_cluster.iter().map(Vec::as_slice))
}

/// `out = (Σ χᵢᵀ Wᵢ χᵢ) b`.
pub fn normal_matvec(design: &DesignAssembly, spec: &WeightSpec, b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(b.len(), design.n_leaves());
    out.iter_mut().for_each(|v| *v = 0.0);
    if spec.is_identity() {
        for (o, (&v, &bm)) in out.iter_mut().zip(design.counts.iter().zip(b)) {
            *o = v as f64 * bm;
        }
        return;
    }
    let cap = design.max_cluster_len();
    let mut gathered = vec![0.0; cap];
    let mut weighted = vec![0.0; cap];
    for i in 0..design.n_clusters() {
        let rows = design.cluster(i);
        let n = rows.len();
        for (g, &l) in gathered.iter_mut().zip(rows) {
            *g = b[l as usize];
        }
        weight_matvec(spec, &gathered[..n], &mut weighted[..n]);
        for (&w, &l) in weighted[..n].iter().zip(rows) {
            out[l as usize] += w;
        }
    }
}

/// `Σ χᵢᵀ Wᵢ vᵢ` for a row-aligned vector `v` (responses or residuals).
pub fn weighted_rhs(design: &DesignAssembly, spec: &WeightSpec, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), design.n_rows());
    let mut out = vec![0.0; design.n_leaves()];
    let mut weighted = vec![0.0; design.max_cluster_len()];
    for i in 0..design.n_clusters() {
        let range = design.cluster_range(i);
        let n = range.len();
        weight_matvec(spec, &v[range.clone()], &mut weighted[..n]);
        for (&w, &l) in weighted[..n].iter().zip(&design.leaf_rows[range]) {
            out[l as usize] += w;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative residual tolerance `‖r‖ ≤ tol ‖rhs‖`.
    pub tol: f64,
    /// Iteration cap; derived from the weight class's condition bound when unset.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm relative to `‖rhs‖`.
    pub residual: f64,
}

/// Plain conjugate gradients from a zero start.
pub fn cg_solve<F>(mut op: F, rhs: &[f64], tol: f64, max_iter: usize) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let rhs_norm = libm::sqrt(dot(rhs, rhs));
    if rhs_norm == 0.0 {
        return Ok(SolveReport { solution: x, iterations: 0, residual: 0.0 });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let target = tol * rhs_norm;
    for it in 1..=max_iter {
        op(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonConvergence { iterations: it, residual: libm::sqrt(rr) / rhs_norm, solution: x });
        }
        let alpha = rr / pap;
        for j in 0..n {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rr_new = dot(&r, &r);
        if libm::sqrt(rr_new) <= target {
            return Ok(SolveReport { solution: x, iterations: it, residual: libm::sqrt(rr_new) / rhs_norm });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for j in 0..n {
            p[j] = r[j] + beta * p[j];
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: libm::sqrt(rr) / rhs_norm, solution: x })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Condition bound `2 C_W / c_W` over the range endpoints, the current value
/// and the cluster sizes present, times the spread of the leaf counts.
pub fn condition_bound(design: &DesignAssembly, spec: &WeightSpec) -> f64 {
    let range = spec.range();
    let mut ratio: f64 = 1.0;
    for rho in [range.lo, range.hi, spec.rho()] {
        let s = WeightSpec::new(spec.class(), rho, range).unwrap_or(*spec);
        for n in design.cluster_sizes() {
            ratio = ratio.max(norm_one(&s, n) / dominance_margin(&s, n));
        }
    }
    let occupied = design.counts.iter().filter(|&&c| c > 0);
    let (lo, hi) = occupied.fold((usize::MAX, 0), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    let spread = if hi == 0 { 1.0 } else { hi as f64 / lo as f64 };
    2.0 * ratio * spread
}

/// Default CG iteration cap `10 ⌈√κ̄ ln(1/tol)⌉`.
pub fn default_max_iter(design: &DesignAssembly, spec: &WeightSpec, tol: f64) -> usize {
    let kappa = condition_bound(design, spec);
    let steps = libm::ceil(libm::sqrt(kappa) * libm::log(1.0 / tol).max(1.0));
    10 * (steps as usize).max(1)
}

fn max_iter(design: &DesignAssembly, spec: &WeightSpec, opts: &SolveOptions) -> usize {
    opts.max_iter.unwrap_or_else(|| default_max_iter(design, spec, opts.tol))
}

/// Solves `(Σ χᵀWχ) x = rhs` where `rhs` vanishes on empty leaves.
fn solve_normal(design: &DesignAssembly, spec: &WeightSpec, rhs: &[f64], opts: &SolveOptions) -> Result<SolveReport> {
    if spec.is_identity() {
        let solution = rhs
            .iter()
            .zip(&design.counts)
            .map(|(&r, &c)| if c == 0 { 0.0 } else { r / c as f64 })
            .collect();
        return Ok(SolveReport { solution, iterations: 0, residual: 0.0 });
    }
    let cap = max_iter(design, spec, opts);
    cg_solve(|b, out| normal_matvec(design, spec, b, out), rhs, opts.tol, cap)
}

/// Leaf values `γ̂` with the leaves that received no rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafFit {
    /// Empty leaves carry the count-weighted mean of the occupied ones.
    pub values: Vec<f64>,
    pub empty: Vec<usize>,
    pub iterations: usize,
}

/// Weighted least squares leaf values for row-aligned responses `y`.
///
/// Empty leaves have zero rows and columns in the normal matrix; CG started
/// from zero never leaves the occupied subspace, so they are solved around.
pub fn fitted_leaf_values(design: &DesignAssembly, spec: &WeightSpec, y: &[f64], opts: &SolveOptions) -> Result<LeafFit> {
    if design.n_rows() == 0 {
        return Err(Error::EmptyDesign);
    }
    let rhs = weighted_rhs(design, spec, y);
    let report = solve_normal(design, spec, &rhs, opts)?;
    let mut values = report.solution;
    let empty = design.empty_leaves();
    if !empty.is_empty() {
        let (num, den) = values
            .iter()
            .zip(&design.counts)
            .fold((0.0, 0.0), |(n, d), (&v, &c)| (n + v * c as f64, d + c as f64));
        for &m in &empty {
            values[m] = num / den;
        }
    }
    Ok(LeafFit { values, empty, iterations: report.iterations })
}

/// Column `(Σ χᵀWχ)^{-1} e_m`, restricted to the occupied leaves.
pub fn basis_solve(design: &DesignAssembly, spec: &WeightSpec, m: usize, opts: &SolveOptions) -> Result<SolveReport> {
    if design.counts[m] == 0 {
        return Err(Error::EmptyLeaf(m));
    }
    let mut e = vec![0.0; design.n_leaves()];
    e[m] = 1.0;
    solve_normal(design, spec, &e, opts)
}

/// Row weights `ω` of the fitted value of leaf `m`: `γ̂_m = Σ_ij ω_ij y_ij`
/// with `ωᵢ = Wᵢ χᵢ A⁻¹ e_m`. Row-aligned with the design.
pub fn observation_weights(design: &DesignAssembly, spec: &WeightSpec, m: usize, opts: &SolveOptions) -> Result<Vec<f64>> {
    let column = basis_solve(design, spec, m, opts)?.solution;
    let mut omega = vec![0.0; design.n_rows()];
    let mut gathered = vec![0.0; design.max_cluster_len()];
    for i in 0..design.n_clusters() {
        let range = design.cluster_range(i);
        let n = range.len();
        for (g, &l) in gathered.iter_mut().zip(design.cluster(i)) {
            *g = column[l as usize];
        }
        weight_matvec(spec, &gathered[..n], &mut omega[range]);
    }
    Ok(omega)
}

/// Dense `Σ χᵢᵀ Wᵢ χᵢ` on the occupied leaves, indexed through `slot`
/// (`u32::MAX` marks an empty leaf). Row-major `k x k`.
pub(crate) fn dense_normal(design: &DesignAssembly, spec: &WeightSpec, slot: &[u32], k: usize) -> Vec<f64> {
    let mut a = vec![0.0; k * k];
    let at = |l: u32| slot[l as usize] as usize;
    let rho = spec.rho();
    if spec.is_identity() {
        for (m, &c) in design.counts.iter().enumerate() {
            if c > 0 {
                let s = slot[m] as usize;
                a[s * k + s] = c as f64;
            }
        }
        return a;
    }
    match spec.class() {
        WeightClass::Identity => unreachable!(),
        WeightClass::Equicorrelated => {
            // W = (I - c 11ᵀ)/(1-ρ): diagonal counts minus a rank-one term per cluster
            let scale = 1.0 / (1.0 - rho);
            let mut tally: Vec<(usize, f64)> = Vec::new();
            for i in 0..design.n_clusters() {
                let rows = design.cluster(i);
                let c = rho / (1.0 + (rows.len() as f64 - 1.0) * rho);
                tally.clear();
                for &l in rows {
                    let s = at(l);
                    a[s * k + s] += scale;
                    match tally.iter_mut().find(|(t, _)| *t == s) {
                        Some(entry) => entry.1 += 1.0,
                        None => tally.push((s, 1.0)),
                    }
                }
                for &(p, up) in &tally {
                    for &(q, uq) in &tally {
                        a[p * k + q] -= scale * c * up * uq;
                    }
                }
            }
        }
        WeightClass::Ar1 => {
            let interior = 1.0 + rho * rho;
            for i in 0..design.n_clusters() {
                let rows = design.cluster(i);
                let n = rows.len();
                if n == 1 {
                    let s = at(rows[0]);
                    a[s * k + s] += 1.0 - rho * rho;
                    continue;
                }
                for j in 0..n {
                    let s = at(rows[j]);
                    a[s * k + s] += if j == 0 || j == n - 1 { 1.0 } else { interior };
                    if j + 1 < n {
                        let t = at(rows[j + 1]);
                        a[s * k + t] -= rho;
                        a[t * k + s] -= rho;
                    }
                }
            }
        }
    }
    a
}
