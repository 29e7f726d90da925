//! Honest clustered trees, little-bags forests, prediction and intervals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{leaf_mass, BoundingBox, ClusteredDataset, CovariateShiftSpec, ForestConfig, RhoStrategy, SubsampleSizes};
use crate::error::{Error, Result};
use crate::partition::{fit_partition, TreePartition};
use crate::rho::{moment_rho, pilot_residuals, LossEvaluator};
use crate::rng::{stream, Stage};
use crate::solver::{assemble_design, fitted_leaf_values, SolveOptions};
use crate::stats::normal_quantile;
use crate::weights::{WeightClass, WeightSpec};

/// One way of choosing the correlation parameter, with its shift target.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub strategy: RhoStrategy,
    pub shift: CovariateShiftSpec,
}

/// Cluster indices used by one tree.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TreeSamples {
    pub split: Vec<u32>,
    pub eval: Vec<u32>,
    pub corr: Vec<u32>,
}

impl TreeSamples {
    /// True when no cluster serves two roles. Dishonest trees reuse `split`
    /// for evaluation and are reported as not disjoint.
    pub fn disjoint(&self) -> bool {
        let mut all: Vec<u32> = self.split.iter().chain(&self.eval).chain(&self.corr).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusteredTree {
    pub partition: TreePartition,
    pub rho_hat: f64,
    pub leaf_values: Vec<f64>,
    pub samples: TreeSamples,
    /// Leaves that received no evaluation rows; their values come from the
    /// nearest ancestor subtree that did.
    pub imputed_leaves: Vec<u32>,
    /// The shift target put no mass on leaves with weight-estimation rows, so
    /// the tree fell back to `rho = 0`.
    pub rho_fallback: bool,
}

impl ClusteredTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_values[self.partition.leaf_index(x)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prediction {
    pub mu_hat: f64,
    /// The query lies outside the bounding box of the training covariates.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntervalEstimate {
    pub point: f64,
    pub variance: f64,
    pub lo: f64,
    pub hi: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusteredForest {
    pub config: ForestConfig,
    pub shift: CovariateShiftSpec,
    pub dim: usize,
    pub domain: BoundingBox,
    /// `R` groups of `B` trees. A `None` marks a degenerate tree.
    pub bags: Vec<Vec<Option<ClusteredTree>>>,
}

/// Draws the cluster subsets of tree `(r, b)`.
pub fn draw_samples(cfg: &ForestConfig, sizes: &SubsampleSizes, n_clusters: usize, r: usize, b: usize) -> TreeSamples {
    let mut rng = stream(cfg.seed, r as u64, b as u64, Stage::SubsetDraw);
    if !cfg.honesty {
        let mut split: Vec<u32> = sample(&mut rng, n_clusters, sizes.s_i).into_iter().map(|i| i as u32).collect();
        split.sort_unstable();
        return TreeSamples { eval: split.clone(), split, corr: Vec::new() };
    }
    let pool = bag_pool(cfg, n_clusters, r);
    let take = 2 * sizes.s_i + sizes.s_corr;
    let picks: Vec<u32> = sample(&mut rng, pool.len(), take).into_iter().map(|j| pool[j]).collect();
    let mut split = picks[..sizes.s_i].to_vec();
    let mut eval = picks[sizes.s_i..2 * sizes.s_i].to_vec();
    let mut corr = picks[2 * sizes.s_i..].to_vec();
    split.sort_unstable();
    eval.sort_unstable();
    corr.sort_unstable();
    TreeSamples { split, eval, corr }
}

/// Half-sample of little bag `r`; the whole index set when `R = 1`.
pub fn bag_pool(cfg: &ForestConfig, n_clusters: usize, r: usize) -> Vec<u32> {
    if cfg.bags == 1 {
        return (0..n_clusters as u32).collect();
    }
    let mut rng = stream(cfg.seed, r as u64, 0, Stage::BagDraw);
    let mut pool: Vec<u32> = sample(&mut rng, n_clusters, n_clusters / 2).into_iter().map(|i| i as u32).collect();
    pool.sort_unstable();
    pool
}

fn spec_for(cfg: &ForestConfig, rho: f64) -> Result<WeightSpec> {
    if cfg.weight_class == WeightClass::Identity || rho == 0.0 {
        return Ok(WeightSpec::identity());
    }
    WeightSpec::new(cfg.weight_class, rho, cfg.rho_range())
}

fn solve_options(cfg: &ForestConfig) -> SolveOptions {
    SolveOptions { tol: cfg.cg_tol, max_iter: cfg.cg_max_iter }
}

fn ids(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&i| i as usize).collect()
}

/// Fits one tree per variant on shared subsets, partition and residuals.
/// Returns `None` entries for a degenerate tree.
pub fn fit_tree_variants<R: Rng + ?Sized>(
    ds: &ClusteredDataset,
    samples: &TreeSamples,
    cfg: &ForestConfig,
    variants: &[Variant],
    domain: &BoundingBox,
    rng: &mut R,
) -> Result<Vec<Option<ClusteredTree>>> {
    let d = ds.dim();
    let (split_ids, eval_ids, corr_ids) = (ids(&samples.split), ids(&samples.eval), ids(&samples.corr));
    let (x, y) = ds.gather(&split_ids);
    let partition = fit_partition(&x, &y, d, cfg, rng);
    let design = assemble_design(&partition, ds, &eval_ids);
    if design.n_rows() == 0 {
        return Ok(vec![None; variants.len()]);
    }
    let (_, y_eval) = ds.gather(&eval_ids);
    let opts = solve_options(cfg);
    let range = cfg.rho_range();

    // correlation parameter per variant
    let mut rhos = vec![0.0; variants.len()];
    let mut fallback = vec![false; variants.len()];
    let needs_residuals = variants.iter().any(|v| v.strategy.needs_corr_sample());
    if needs_residuals && cfg.weight_class != WeightClass::Identity {
        let residuals = pilot_residuals(&partition, ds, &corr_ids);
        let counts = residuals.design.counts();
        let count_weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let mut loss_weights: Vec<Vec<f64>> = Vec::new();
        let mut loss_slots = Vec::new();
        for (j, v) in variants.iter().enumerate() {
            match v.strategy {
                RhoStrategy::Fixed(rho) => rhos[j] = rho,
                RhoStrategy::Moment => rhos[j] = moment_rho(&residuals, cfg.weight_class, range)?,
                RhoStrategy::Train => {
                    loss_weights.push(count_weights.clone());
                    loss_slots.push(j);
                }
                RhoStrategy::QShift => {
                    let mut m = leaf_mass(&v.shift, &partition, Some(domain), Some(counts))?.masses;
                    // only leaves with residual rows enter the loss
                    for (w, &c) in m.iter_mut().zip(counts) {
                        if c == 0 {
                            *w = 0.0;
                        }
                    }
                    let total: f64 = m.iter().sum();
                    if total > 0.0 {
                        m.iter_mut().for_each(|w| *w /= total);
                        loss_weights.push(m);
                        loss_slots.push(j);
                    } else {
                        fallback[j] = true;
                    }
                }
            }
        }
        if !loss_weights.is_empty() {
            let eval = LossEvaluator::new(&residuals, cfg.weight_class, range, opts);
            let refs: Vec<&[f64]> = loss_weights.iter().map(Vec::as_slice).collect();
            let strategies: Vec<RhoStrategy> = loss_slots.iter().map(|&j| variants[j].strategy).collect();
            for (curve, &j) in eval.curves(cfg.rho_grid, &refs, &strategies)?.into_iter().zip(&loss_slots) {
                rhos[j] = curve.rho_hat;
            }
        }
    } else {
        for (j, v) in variants.iter().enumerate() {
            if let RhoStrategy::Fixed(rho) = v.strategy {
                rhos[j] = rho;
            }
        }
    }

    // leaf values, shared between variants that landed on the same rho
    let mut fits: Vec<(u64, Vec<f64>, Vec<u32>)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for j in 0..variants.len() {
        let rho = rhos[j];
        let key = rho.to_bits();
        let pos = match fits.iter().position(|f| f.0 == key) {
            Some(p) => p,
            None => {
                let spec = spec_for(cfg, rho)?;
                let fit = fitted_leaf_values(&design, &spec, &y_eval, &opts)?;
                let mut values = fit.values;
                impute_from_ancestors(&partition, design.counts(), &mut values, &fit.empty);
                fits.push((key, values, fit.empty.iter().map(|&m| m as u32).collect()));
                fits.len() - 1
            }
        };
        out.push(Some(ClusteredTree {
            partition: partition.clone(),
            rho_hat: rho,
            leaf_values: fits[pos].1.clone(),
            samples: samples.clone(),
            imputed_leaves: fits[pos].2.clone(),
            rho_fallback: fallback[j],
        }));
    }
    Ok(out)
}

/// Empty leaves take the count-weighted mean of the occupied leaves in the
/// nearest ancestor subtree that has any.
fn impute_from_ancestors(partition: &TreePartition, counts: &[usize], values: &mut [f64], empty: &[usize]) {
    for &m in empty {
        for range in partition.ancestor_ranges(m) {
            let (num, den) = range
                .filter(|&l| counts[l] > 0)
                .fold((0.0, 0.0), |(n, d), l| (n + counts[l] as f64 * values[l], d + counts[l] as f64));
            if den > 0.0 {
                values[m] = num / den;
                break;
            }
        }
    }
}

fn check_variant(cfg: &ForestConfig, v: &Variant, dim: usize) -> Result<()> {
    v.shift.validate(dim)?;
    if let RhoStrategy::Fixed(rho) = v.strategy {
        let range = cfg.rho_range();
        if cfg.weight_class == WeightClass::Identity && rho != 0.0 {
            return Err(Error::RhoOutOfRange { rho, lo: 0.0, hi: 0.0 });
        }
        if !range.contains(rho) {
            return Err(Error::RhoOutOfRange { rho, lo: range.lo, hi: range.hi });
        }
    }
    if !cfg.honesty && v.strategy.needs_corr_sample() {
        return Err(Error::InvalidConfig("forests without honesty need a fixed correlation parameter".into()));
    }
    Ok(())
}

/// Fits one forest per variant. All variants share subsets, partitions and
/// pilot residuals tree by tree; `cfg.rho_strategy` is replaced by each
/// variant's strategy in the stored configuration.
pub fn fit_forest_variants(ds: &ClusteredDataset, cfg: &ForestConfig, variants: &[Variant]) -> Result<Vec<ClusteredForest>> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no forest variant requested".into()));
    }
    let n = ds.n_clusters();
    let mut probe = cfg.clone();
    if let Some(v) = variants.iter().find(|v| v.strategy.needs_corr_sample()) {
        probe.rho_strategy = v.strategy;
    } else {
        probe.rho_strategy = variants[0].strategy;
    }
    let sizes = probe.resolve(n)?;
    for v in variants {
        check_variant(cfg, v, ds.dim())?;
    }
    let domain = ds.bounding_box();
    let jobs: Vec<(usize, usize)> = (0..cfg.bags).flat_map(|r| (0..cfg.trees_per_bag).map(move |b| (r, b))).collect();
    let fit_one = |&(r, b): &(usize, usize)| {
        let samples = draw_samples(cfg, &sizes, n, r, b);
        let mut rng = stream(cfg.seed, r as u64, b as u64, Stage::SplitNoise);
        fit_tree_variants(ds, &samples, cfg, variants, &domain, &mut rng)
    };

    #[cfg(feature = "parallel")]
    let fitted: Vec<Result<Vec<Option<ClusteredTree>>>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(fit_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fitted: Vec<Result<Vec<Option<ClusteredTree>>>> = jobs.iter().map(fit_one).collect();

    let mut forests: Vec<ClusteredForest> = variants
        .iter()
        .map(|v| ClusteredForest {
            config: ForestConfig { rho_strategy: v.strategy, ..cfg.clone() },
            shift: v.shift.clone(),
            dim: ds.dim(),
            domain: domain.clone(),
            bags: (0..cfg.bags).map(|_| Vec::with_capacity(cfg.trees_per_bag)).collect(),
        })
        .collect();
    for (&(r, _), trees) in jobs.iter().zip(fitted) {
        for (forest, tree) in forests.iter_mut().zip(trees?) {
            forest.bags[r].push(tree);
        }
    }
    for f in &forests {
        if f.trees().next().is_none() {
            return Err(Error::AllTreesDegenerate);
        }
    }
    Ok(forests)
}

impl ClusteredForest {
    /// Fits a forest with `cfg.rho_strategy` for the target `shift`.
    pub fn fit(ds: &ClusteredDataset, cfg: &ForestConfig, shift: &CovariateShiftSpec) -> Result<Self> {
        let variant = Variant { strategy: cfg.rho_strategy, shift: shift.clone() };
        Ok(fit_forest_variants(ds, cfg, &[variant])?.remove(0))
    }

    pub fn trees(&self) -> impl Iterator<Item = &ClusteredTree> {
        self.bags.iter().flatten().flatten()
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidData(format!("query has {} coordinates, expected {}", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfDomain("query has non-finite coordinates".into()));
        }
        Ok(())
    }

    /// Mean tree prediction of each bag with at least one usable tree.
    pub fn bag_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        let means: Vec<f64> = self
            .bags
            .iter()
            .filter_map(|bag| {
                let (sum, n) = bag.iter().flatten().fold((0.0, 0usize), |(s, n), t| (s + t.predict(x), n + 1));
                (n > 0).then(|| sum / n as f64)
            })
            .collect();
        if means.is_empty() {
            return Err(Error::AllTreesDegenerate);
        }
        Ok(means)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let means = self.bag_means(x)?;
        Ok(Prediction { mu_hat: mean(&means), extrapolated: !self.domain.contains(x) })
    }

    /// Little-bags variance `(1/R) Σ_r (μ̂_r − μ̂)²`.
    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        if !self.config.honesty {
            return Err(Error::VarianceUnavailable);
        }
        let means = self.bag_means(x)?;
        if means.len() < 2 {
            return Err(Error::InsufficientBags(means.len()));
        }
        Ok(bag_variance(&means))
    }

    pub fn confidence_interval(&self, x: &[f64], alpha_ci: f64) -> Result<IntervalEstimate> {
        if !(alpha_ci > 0.0 && alpha_ci < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha_ci = {alpha_ci} must lie in (0, 1)")));
        }
        let variance = self.variance(x)?;
        let point = mean(&self.bag_means(x)?);
        let (lo, hi) = interval(point, variance, alpha_ci);
        Ok(IntervalEstimate { point, variance, lo, hi, extrapolated: !self.domain.contains(x) })
    }

    /// `∫ μ̂ dQ`: exact for point masses and empirical targets, Monte Carlo
    /// with `n_draws` seeded draws for boxes.
    pub fn integrated_mean(&self, shift: &CovariateShiftSpec, n_draws: usize, seed: u64) -> Result<f64> {
        shift.validate(self.dim)?;
        match shift {
            CovariateShiftSpec::PointMass { x } => Ok(self.predict(x)?.mu_hat),
            CovariateShiftSpec::Empirical { rows, dim } => {
                let mut s = 0.0;
                for row in rows.chunks_exact(*dim) {
                    s += self.predict(row)?.mu_hat;
                }
                Ok(s / (rows.len() / dim) as f64)
            }
            CovariateShiftSpec::UniformBox { lo, hi } => {
                if n_draws == 0 {
                    return Err(Error::InvalidConfig("n_draws must be positive".into()));
                }
                let mut rng = stream(seed, 0, 0, Stage::Integration);
                let mut x = vec![0.0; self.dim];
                let mut s = 0.0;
                for _ in 0..n_draws {
                    for (f, xf) in x.iter_mut().enumerate() {
                        let u: f64 = rng.random();
                        *xf = lo[f] + u * (hi[f] - lo[f]);
                    }
                    s += self.predict(&x)?.mu_hat;
                }
                Ok(s / n_draws as f64)
            }
            CovariateShiftSpec::Training => Err(Error::InvalidConfig(
                "the training target has no stored covariates; pass them as an empirical target".into(),
            )),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(1/R) Σ (m_r − m̄)²` over bag means.
pub fn bag_variance(means: &[f64]) -> f64 {
    let m = mean(means);
    means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / means.len() as f64
}

/// `point ∓ Φ⁻¹(1 − α/2) √variance`.
pub fn interval(point: f64, variance: f64, alpha_ci: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha_ci / 2.0) * libm::sqrt(variance.max(0.0));
    (point - half, point + half)
}

/// Suggested `s_I / k` balancing squared bias and variance.
///
/// `φ = π ln(1/(1−α)) / ln(1/α)` and the ratio is
/// `2 (C² φ I / (n_c^{2φ/d} V))^{d/(2φ+d)}`.
pub fn recommend_ratio(
    n_clusters: f64,
    n_c: f64,
    d: usize,
    alpha_split: f64,
    pi_frac: f64,
    c_bias: f64,
    v_hat: f64,
) -> Result<f64> {
    let positive = [n_clusters, n_c, alpha_split, pi_frac, c_bias, v_hat];
    if d == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || alpha_split > 0.5 {
        return Err(Error::InvalidConfig("recommend_ratio needs positive finite inputs and alpha_split <= 0.5".into()));
    }
    let d = d as f64;
    let phi = pi_frac * libm::log(1.0 / (1.0 - alpha_split)) / libm::log(1.0 / alpha_split);
    let inner = c_bias * c_bias * phi * n_clusters / (libm::pow(n_c, 2.0 * phi / d) * v_hat);
    Ok(2.0 * libm::pow(inner, d / (2.0 * phi + d)))
}

/// Plug-in estimate of the single-tree variance integrated over `points`
/// (row-major): the across-tree variance of tree predictions within each
/// bag, averaged over bags and points.
pub fn estimate_tree_variance(forest: &ClusteredForest, points: &[f64]) -> Result<f64> {
    if points.is_empty() || !points.len().is_multiple_of(forest.dim) {
        return Err(Error::InvalidData("points must hold whole rows".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for x in points.chunks_exact(forest.dim) {
        for bag in &forest.bags {
            let preds: Vec<f64> = bag.iter().flatten().map(|t| t.predict(x)).collect();
            if preds.len() >= 2 {
                let m = mean(&preds);
                total += preds.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (preds.len() - 1) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InsufficientBags(0));
    }
    Ok(total / n as f64)
}
