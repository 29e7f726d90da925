//! Grouped-data containers, forest configuration and covariate-shift targets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::partition::TreePartition;
use crate::weights::{RhoRange, WeightClass};

/// One group of observations. `x` is row-major with `y.len()` rows.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Cluster {
    pub id: String,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, j: usize, d: usize) -> &[f64] {
        &self.x[j * d..(j + 1) * d]
    }
}

/// Immutable collection of clusters sharing a covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    dim: usize,
    n_obs: usize,
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>, dim: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyInput);
        }
        if dim == 0 {
            return Err(Error::InvalidData("covariate dimension must be at least 1".into()));
        }
        let mut n_obs = 0;
        for c in &clusters {
            if c.y.is_empty() {
                return Err(Error::InvalidData(format!("cluster {} has no rows", c.id)));
            }
            if c.x.len() != c.y.len() * dim {
                return Err(Error::InvalidData(format!(
                    "cluster {} has {} responses but {} covariate entries (d = {dim})",
                    c.id,
                    c.y.len(),
                    c.x.len()
                )));
            }
            if c.y.iter().chain(&c.x).any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("cluster {} has non-finite values", c.id)));
            }
            n_obs += c.y.len();
        }
        Ok(ClusteredDataset { clusters, dim, n_obs })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &Cluster {
        &self.clusters[i]
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::len).collect()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for c in &self.clusters {
            for row in c.x.chunks_exact(self.dim) {
                for (f, &v) in row.iter().enumerate() {
                    lo[f] = lo[f].min(v);
                    hi[f] = hi[f].max(v);
                }
            }
        }
        BoundingBox { lo, hi }
    }

    /// Stacks the rows of the listed clusters, in list order.
    pub fn gather(&self, ids: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let n: usize = ids.iter().map(|&i| self.clusters[i].len()).sum();
        let mut x = Vec::with_capacity(n * self.dim);
        let mut y = Vec::with_capacity(n);
        for &i in ids {
            x.extend_from_slice(&self.clusters[i].x);
            y.extend_from_slice(&self.clusters[i].y);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }
}

/// Target covariate distribution `Q` for weight estimation and evaluation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum CovariateShiftSpec {
    PointMass { x: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Row-major covariate rows.
    Empirical { rows: Vec<f64>, dim: usize },
    /// Empirical distribution of the weight-estimation subsample.
    Training,
}

impl CovariateShiftSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self {
            CovariateShiftSpec::PointMass { x } => {
                if x.len() != dim {
                    return bad(format!("point mass has {} coordinates, expected {dim}", x.len()));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return bad("point mass has non-finite coordinates".into());
                }
            }
            CovariateShiftSpec::UniformBox { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return bad(format!("box bounds must have {dim} entries"));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return bad("box needs finite bounds with lo <= hi".into());
                }
            }
            CovariateShiftSpec::Empirical { rows, dim: d } => {
                if *d != dim {
                    return bad(format!("empirical rows have dimension {d}, expected {dim}"));
                }
                if rows.is_empty() || rows.len() % dim != 0 {
                    return bad("empirical target needs at least one complete row".into());
                }
                if rows.iter().any(|v| !v.is_finite()) {
                    return bad("empirical target has non-finite values".into());
                }
            }
            CovariateShiftSpec::Training => {}
        }
        Ok(())
    }
}

/// Masses `Q(L_m)` over the leaves of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafMass {
    pub masses: Vec<f64>,
    /// Set when a point-mass target lies outside the partition's covariate domain.
    pub extrapolated: bool,
}

/// Evaluates `Q(L_m)` for every leaf.
///
/// Leaves tile all of `R^d` (outer faces are unbounded), so point masses and
/// boxes always land somewhere; `domain` only decides the extrapolation flag.
/// `training_counts` supplies per-leaf row counts of the weight-estimation
/// sample and is required for [`CovariateShiftSpec::Training`].
pub fn leaf_mass(
    q: &CovariateShiftSpec,
    partition: &TreePartition,
    domain: Option<&BoundingBox>,
    training_counts: Option<&[usize]>,
) -> Result<LeafMass> {
    let d = partition.dim();
    q.validate(d)?;
    let m = partition.n_leaves();
    let mut masses = vec![0.0; m];
    let mut extrapolated = false;
    match q {
        CovariateShiftSpec::PointMass { x } => {
            masses[partition.leaf_index(x)] = 1.0;
            extrapolated = domain.is_some_and(|b| !b.contains(x));
        }
        CovariateShiftSpec::UniformBox { lo, hi } => {
            for (leaf, mass) in partition.leaves().iter().zip(masses.iter_mut()) {
                let mut frac = 1.0;
                for f in 0..d {
                    let (cell_lo, cell_hi) = (leaf.lo[f], leaf.hi[f]);
                    let width = hi[f] - lo[f];
                    frac *= if width > 0.0 {
                        (hi[f].min(cell_hi) - lo[f].max(cell_lo)).max(0.0) / width
                    } else if lo[f] > cell_lo && lo[f] <= cell_hi {
                        // degenerate side: cells are (lo, hi] under the `<=` routing rule
                        1.0
                    } else {
                        0.0
                    };
                    if frac == 0.0 {
                        break;
                    }
                }
                *mass = frac;
            }
        }
        CovariateShiftSpec::Empirical { rows, .. } => {
            let n = rows.len() / d;
            for row in rows.chunks_exact(d) {
                masses[partition.leaf_index(row)] += 1.0;
            }
            masses.iter_mut().for_each(|v| *v /= n as f64);
        }
        CovariateShiftSpec::Training => {
            let counts = training_counts.ok_or_else(|| {
                Error::InvalidConfig("training target needs weight-estimation leaf counts".into())
            })?;
            if counts.len() != m {
                return Err(Error::InvalidData(format!(
                    "{} training counts for {m} leaves",
                    counts.len()
                )));
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                return Err(Error::ZeroMass);
            }
            for (mass, &c) in masses.iter_mut().zip(counts) {
                *mass = c as f64 / total as f64;
            }
        }
    }
    if masses.iter().all(|&v| v == 0.0) {
        return Err(Error::OutOfDomain("target distribution misses every leaf".into()));
    }
    Ok(LeafMass { masses, extrapolated })
}

/// How a tree chooses its correlation parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind", content = "rho"))]
pub enum RhoStrategy {
    Fixed(f64),
    /// Minimise the estimated tree variance integrated against the shift target.
    QShift,
    /// Minimise the estimated training-distribution integrated variance.
    Train,
    /// Moment estimator of the within-cluster residual correlation.
    Moment,
}

impl RhoStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            RhoStrategy::Fixed(_) => "fixed",
            RhoStrategy::QShift => "q_shift",
            RhoStrategy::Train => "train",
            RhoStrategy::Moment => "moment",
        }
    }

    pub fn needs_corr_sample(&self) -> bool {
        !matches!(self, RhoStrategy::Fixed(_))
    }
}

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ForestConfig {
    /// Clusters per tree for splitting and, separately, for evaluation.
    #[cfg_attr(feature = "serde", serde(rename = "s_I"))]
    pub s_i: Option<usize>,
    /// Clusters per tree for weight estimation.
    pub s_corr: Option<usize>,
    /// Minimum node size.
    pub k: usize,
    /// Trees per little bag.
    #[cfg_attr(feature = "serde", serde(rename = "B"))]
    pub trees_per_bag: usize,
    /// Number of little bags.
    #[cfg_attr(feature = "serde", serde(rename = "R"))]
    pub bags: usize,
    /// When set and `s_I` is not, `s_I = floor(I^beta / 3)`.
    pub beta: Option<f64>,
    pub alpha_split: f64,
    pub pi_frac: f64,
    pub honesty: bool,
    pub alpha_ci: f64,
    pub seed: u64,
    pub weight_class: WeightClass,
    pub gamma_lo: Option<f64>,
    pub gamma_hi: Option<f64>,
    pub rho_strategy: RhoStrategy,
    pub rho_grid: usize,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    /// Features examined per split; all when unset.
    pub mtry: Option<usize>,
    /// Subsample fraction per tree when `honesty` is off.
    pub dishonest_frac: f64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            s_i: None,
            s_corr: None,
            k: 10,
            trees_per_bag: 500,
            bags: 1,
            beta: None,
            alpha_split: 0.05,
            pi_frac: 0.5,
            honesty: true,
            alpha_ci: 0.05,
            seed: 0,
            weight_class: WeightClass::Equicorrelated,
            gamma_lo: None,
            gamma_hi: None,
            rho_strategy: RhoStrategy::QShift,
            rho_grid: 33,
            cg_tol: 1e-10,
            cg_max_iter: None,
            mtry: None,
            dishonest_frac: 0.5,
        }
    }
}

/// Default subsampling rate when neither `s_I` nor `beta` is given.
pub const DEFAULT_BETA: f64 = 0.9;

/// Resolved per-tree subsample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsampleSizes {
    pub s_i: usize,
    pub s_corr: usize,
    /// Clusters available to each little bag.
    pub pool: usize,
}

impl ForestConfig {
    pub fn rho_range(&self) -> RhoRange {
        let widest = self.weight_class.default_range();
        RhoRange { lo: self.gamma_lo.unwrap_or(widest.lo), hi: self.gamma_hi.unwrap_or(widest.hi) }
    }

    /// Checks the configuration against a dataset with `n_clusters` clusters
    /// and returns the subsample sizes it implies.
    pub fn resolve(&self, n_clusters: usize) -> Result<SubsampleSizes> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.alpha_split > 0.0 && self.alpha_split <= 0.5) {
            return bad(format!("alpha_split = {} must lie in (0, 0.5]", self.alpha_split));
        }
        if !(self.pi_frac > 0.0 && self.pi_frac <= 1.0) {
            return bad(format!("pi_frac = {} must lie in (0, 1]", self.pi_frac));
        }
        if self.trees_per_bag == 0 || self.bags == 0 {
            return bad("B and R must be at least 1".into());
        }
        if !(self.alpha_ci > 0.0 && self.alpha_ci < 1.0) {
            return bad(format!("alpha_ci = {} must lie in (0, 1)", self.alpha_ci));
        }
        if !(self.cg_tol > 0.0) {
            return bad("cg_tol must be positive".into());
        }
        if self.rho_grid == 0 {
            return bad("rho_grid must be at least 1".into());
        }
        if self.mtry == Some(0) {
            return bad("mtry must be at least 1".into());
        }
        let range = self.rho_range();
        crate::weights::WeightSpec::new(self.weight_class, range.clamp(0.0), range)?;
        if let RhoStrategy::Fixed(rho) = self.rho_strategy {
            if !range.contains(rho) {
                return Err(Error::RhoOutOfRange { rho, lo: range.lo, hi: range.hi });
            }
        }
        if n_clusters == 0 {
            return Err(Error::EmptyInput);
        }

        if !self.honesty {
            if !matches!(self.rho_strategy, RhoStrategy::Fixed(_)) {
                return bad("forests without honesty need a fixed correlation parameter".into());
            }
            if !(self.dishonest_frac > 0.0 && self.dishonest_frac <= 1.0) {
                return bad("dishonest_frac must lie in (0, 1]".into());
            }
            let s = ((self.dishonest_frac * n_clusters as f64) as usize).max(1);
            return Ok(SubsampleSizes { s_i: s, s_corr: 0, pool: n_clusters });
        }

        let s_i = match (self.s_i, self.beta) {
            (Some(s), _) => s,
            (None, beta) => {
                let beta = beta.unwrap_or(DEFAULT_BETA);
                if !(beta > 0.0 && beta <= 1.0) {
                    return bad(format!("beta = {beta} must lie in (0, 1]"));
                }
                (libm::pow(n_clusters as f64, beta) / 3.0) as usize
            }
        };
        // drawn for every strategy so that fixed and estimated weights see
        // identical split and evaluation subsets
        let needs_corr = self.rho_strategy.needs_corr_sample();
        let s_corr = self.s_corr.unwrap_or(s_i);
        if s_i == 0 {
            return bad("s_I resolves to 0 clusters".into());
        }
        if needs_corr && s_corr == 0 {
            return bad(format!("{} weights need s_corr >= 1", self.rho_strategy.name()));
        }
        let pool = if self.bags == 1 { n_clusters } else { n_clusters / 2 };
        if 2 * s_i + s_corr > pool {
            return bad(format!(
                "honest subsets need 2*s_I + s_corr = {} clusters but each bag holds {pool}",
                2 * s_i + s_corr
            ));
        }
        Ok(SubsampleSizes { s_i, s_corr, pool })
    }
}
