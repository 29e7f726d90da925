//! Pilot residuals and choice of the working correlation parameter.
//!
//! The grid losses are `tr{diag(w) A⁻¹ B A⁻¹}` with `A = Σ χᵀWχ` and
//! `B = Σ χᵀWε̃ε̃ᵀWχ`, which expands to `Σ_m w_m Σ_i (a_mᵀ χᵢᵀ Wᵢ ε̃ᵢ)²` with
//! `a_m = A⁻¹ e_m`. `B` is never formed; only the columns with `w_m > 0` are
//! solved for.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClusteredDataset, RhoStrategy};
use crate::dense::Cholesky;
use crate::error::{Error, Result};
use crate::partition::TreePartition;
use crate::solver::{assemble_design, basis_solve, dense_normal, DesignAssembly, SolveOptions};
use crate::weights::{weight_matvec, RhoRange, WeightClass, WeightSpec};

/// Residuals of the weight-estimation sample around unweighted leaf means.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotResiduals {
    pub design: DesignAssembly,
    /// Row-aligned with `design`.
    pub residuals: Vec<f64>,
    /// Unweighted leaf means; zero for leaves without rows.
    pub leaf_means: Vec<f64>,
}

/// Centres the responses of `ids` on the unweighted means of their own leaves.
pub fn pilot_residuals(partition: &TreePartition, ds: &ClusteredDataset, ids: &[usize]) -> PilotResiduals {
    let design = assemble_design(partition, ds, ids);
    let y: Vec<f64> = ids.iter().flat_map(|&i| ds.cluster(i).y.iter().copied()).collect();
    PilotResiduals::from_design(design, &y)
}

impl PilotResiduals {
    pub fn from_design(design: DesignAssembly, y: &[f64]) -> Self {
        let mut sums = vec![0.0; design.n_leaves()];
        for i in 0..design.n_clusters() {
            for (&l, &v) in design.cluster(i).iter().zip(&y[design.cluster_range(i)]) {
                sums[l as usize] += v;
            }
        }
        let leaf_means: Vec<f64> = sums
            .iter()
            .zip(design.counts())
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        let mut residuals = Vec::with_capacity(y.len());
        for i in 0..design.n_clusters() {
            for (&l, &v) in design.cluster(i).iter().zip(&y[design.cluster_range(i)]) {
                residuals.push(v - leaf_means[l as usize]);
            }
        }
        PilotResiduals { design, residuals, leaf_means }
    }

    pub fn cluster(&self, i: usize) -> &[f64] {
        &self.residuals[self.design.cluster_range(i)]
    }
}

/// Grid of candidate values with their losses.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RhoLossCurve {
    pub strategy: RhoStrategy,
    /// `(rho, loss)` pairs; empty for fixed and moment strategies.
    pub points: Vec<(f64, f64)>,
    pub rho_hat: f64,
}

impl RhoLossCurve {
    /// Grid argmin; ties go to the smaller `|rho|`.
    pub fn from_points(strategy: RhoStrategy, points: Vec<(f64, f64)>) -> Self {
        let mut best = points[0];
        for &(rho, loss) in &points[1..] {
            if loss < best.1 || (loss == best.1 && rho.abs() < best.0.abs()) {
                best = (rho, loss);
            }
        }
        RhoLossCurve { strategy, points, rho_hat: best.0 }
    }
}

/// How the `A⁻¹` columns are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossEngine {
    /// One CG solve per supported column, as in the linear-time construction.
    ConjugateGradient,
    /// Cholesky factor of the compressed occupied system.
    Dense,
    /// Whichever has the smaller operation count estimate.
    #[default]
    Auto,
}

/// Evaluates grid losses for several leaf-weight vectors at once.
#[derive(Debug, Clone)]
pub struct LossEvaluator<'a> {
    residuals: &'a PilotResiduals,
    class: WeightClass,
    range: RhoRange,
    solve: SolveOptions,
    engine: LossEngine,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(residuals: &'a PilotResiduals, class: WeightClass, range: RhoRange, solve: SolveOptions) -> Self {
        LossEvaluator { residuals, class, range, solve, engine: LossEngine::Auto }
    }

    pub fn with_engine(mut self, engine: LossEngine) -> Self {
        self.engine = engine;
        self
    }

    fn spec(&self, rho: f64) -> Result<WeightSpec> {
        if self.class == WeightClass::Identity {
            return if rho == 0.0 { Ok(WeightSpec::identity()) } else { Err(Error::RhoOutOfRange { rho, lo: 0.0, hi: 0.0 }) };
        }
        WeightSpec::new(self.class, rho, self.range)
    }

    /// Losses at `rho`, one per weight vector. Entries of each weight vector
    /// on leaves without residual rows are ignored.
    pub fn losses(&self, rho: f64, weights: &[&[f64]]) -> Result<Vec<f64>> {
        let spec = self.spec(rho)?;
        let design = &self.residuals.design;
        let m_total = design.n_leaves();
        let counts = design.counts();
        let support: Vec<usize> = (0..m_total)
            .filter(|&m| counts[m] > 0 && weights.iter().any(|w| w[m] > 0.0))
            .collect();
        if support.is_empty() {
            return Err(Error::ZeroMass);
        }

        // u_i = W_i ε̃_i, row-aligned
        let mut u = vec![0.0; design.n_rows()];
        for i in 0..design.n_clusters() {
            let range = design.cluster_range(i);
            weight_matvec(&spec, &self.residuals.residuals[range.clone()], &mut u[range]);
        }

        let occupied: Vec<usize> = (0..m_total).filter(|&m| counts[m] > 0).collect();
        let k = occupied.len();
        let use_dense = match self.engine {
            LossEngine::Dense => true,
            LossEngine::ConjugateGradient => false,
            LossEngine::Auto => {
                let (k, c, n) = (k as f64, support.len() as f64, design.n_rows() as f64);
                k * k * k / 3.0 + c * k * k + n < c * 40.0 * n
            }
        };

        let mut scores = vec![0.0; m_total];
        let mut score_column = |m: usize, column: &dyn Fn(u32) -> f64| {
            let mut s = 0.0;
            for i in 0..design.n_clusters() {
                let range = design.cluster_range(i);
                let t: f64 = design.cluster(i).iter().zip(&u[range]).map(|(&l, &ui)| column(l) * ui).sum();
                s += t * t;
            }
            scores[m] = s;
        };

        if use_dense && !spec.is_identity() {
            let mut slot = vec![u32::MAX; m_total];
            for (s, &m) in occupied.iter().enumerate() {
                slot[m] = s as u32;
            }
            let a = dense_normal(design, &spec, &slot, k);
            let chol = Cholesky::factor(&a, k).ok_or(Error::Unidentifiable("normal matrix is not positive definite"))?;
            let mut col = vec![0.0; k];
            for &m in &support {
                col.iter_mut().for_each(|v| *v = 0.0);
                col[slot[m] as usize] = 1.0;
                chol.solve_in_place(&mut col);
                score_column(m, &|l| col[slot[l as usize] as usize]);
            }
        } else {
            for &m in &support {
                let column = basis_solve(design, &spec, m, &self.solve)?.solution;
                score_column(m, &|l| column[l as usize]);
            }
        }

        Ok(weights
            .iter()
            .map(|w| support.iter().map(|&m| if w[m] > 0.0 { w[m] * scores[m] } else { 0.0 }).sum())
            .collect())
    }

    /// Loss curves over `points` grid values, one per weight vector.
    pub fn curves(&self, points: usize, weights: &[&[f64]], strategies: &[RhoStrategy]) -> Result<Vec<RhoLossCurve>> {
        let grid = if self.class == WeightClass::Identity { vec![0.0] } else { self.range.grid(points) };
        let mut tables: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(grid.len()); weights.len()];
        for &rho in &grid {
            for (table, loss) in tables.iter_mut().zip(self.losses(rho, weights)?) {
                table.push((rho, loss));
            }
        }
        Ok(tables.into_iter().zip(strategies).map(|(t, &s)| RhoLossCurve::from_points(s, t)).collect())
    }
}

/// Target-weighted variance loss `Σ_m q_m Σ_i (a_mᵀ χᵢᵀWᵢε̃ᵢ)²` for one mass vector.
pub fn loss_q(residuals: &PilotResiduals, spec: &WeightSpec, masses: &[f64], solve: &SolveOptions) -> Result<f64> {
    let eval = LossEvaluator::new(residuals, spec.class(), spec.range(), *solve);
    Ok(eval.losses(spec.rho(), &[masses])?[0])
}

/// Training loss: the same trace weighted by the leaf counts of the sample.
pub fn loss_train(residuals: &PilotResiduals, spec: &WeightSpec, solve: &SolveOptions) -> Result<f64> {
    let counts: Vec<f64> = residuals.design.counts().iter().map(|&c| c as f64).collect();
    loss_q(residuals, spec, &counts, solve)
}

/// Within-cluster residual correlation by moments, clipped to `range`.
///
/// Equicorrelated weights average all within-cluster pairs; AR(1) weights use
/// adjacent pairs only. `0/0` is read as zero.
pub fn moment_rho(residuals: &PilotResiduals, class: WeightClass, range: RhoRange) -> Result<f64> {
    if class == WeightClass::Identity {
        return Ok(0.0);
    }
    let design = &residuals.design;
    let mut pair_means = 0.0;
    let mut groups = 0usize;
    for i in 0..design.n_clusters() {
        let e = residuals.cluster(i);
        let n = e.len();
        if n < 2 {
            continue;
        }
        let mean_pair = match class {
            WeightClass::Equicorrelated => {
                let s: f64 = e.iter().sum();
                let ss: f64 = e.iter().map(|v| v * v).sum();
                // Σ_{j<k} e_j e_k = ((Σe)² − Σe²)/2
                ((s * s - ss) / 2.0) / (n * (n - 1) / 2) as f64
            }
            _ => e.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1) as f64,
        };
        pair_means += mean_pair;
        groups += 1;
    }
    if groups == 0 {
        return Err(Error::Unidentifiable("no cluster has two or more rows"));
    }
    let n_rows = residuals.residuals.len();
    let second = residuals.residuals.iter().map(|v| v * v).sum::<f64>() / n_rows as f64;
    let raw = pair_means / groups as f64;
    if second == 0.0 {
        return Ok(range.clamp(0.0));
    }
    Ok(range.clamp(raw / second))
}

/// Chooses `rho` for one strategy. `masses` is required for `QShift`.
pub fn estimate_rho(
    residuals: &PilotResiduals,
    class: WeightClass,
    range: RhoRange,
    strategy: RhoStrategy,
    masses: Option<&[f64]>,
    grid_points: usize,
    solve: &SolveOptions,
) -> Result<RhoLossCurve> {
    match strategy {
        RhoStrategy::Fixed(rho) => Ok(RhoLossCurve { strategy, points: Vec::new(), rho_hat: rho }),
        RhoStrategy::Moment => {
            Ok(RhoLossCurve { strategy, points: Vec::new(), rho_hat: moment_rho(residuals, class, range)? })
        }
        RhoStrategy::QShift => {
            let masses = masses.ok_or(Error::InvalidConfig("q_shift needs leaf masses".into()))?;
            let eval = LossEvaluator::new(residuals, class, range, *solve);
            Ok(eval.curves(grid_points, &[masses], &[strategy])?.remove(0))
        }
        RhoStrategy::Train => {
            let counts: Vec<f64> = residuals.design.counts().iter().map(|&c| c as f64).collect();
            let eval = LossEvaluator::new(residuals, class, range, *solve);
            Ok(eval.curves(grid_points, &[&counts], &[strategy])?.remove(0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residuals_of(n_leaves: usize, clusters: &[(&[u32], &[f64])]) -> PilotResiduals {
        let design = DesignAssembly::from_clusters(n_leaves, clusters.iter().map(|c| c.0));
        let y: Vec<f64> = clusters.iter().flat_map(|c| c.1.iter().copied()).collect();
        PilotResiduals::from_design(design, &y)
    }

    #[test]
    fn pilot_centering() {
        let r = residuals_of(1, &[(&[0, 0, 0], &[1.0, 2.0, 3.0])]);
        assert_eq!(r.residuals, vec![-1.0, 0.0, 1.0]);
        let r = residuals_of(1, &[(&[0, 0], &[4.0, 4.0])]);
        assert_eq!(r.residuals, vec![0.0, 0.0]);
        let r = residuals_of(2, &[(&[0, 1], &[2.0, 4.0]), (&[1], &[6.0])]);
        assert_eq!(r.leaf_means, vec![2.0, 5.0]);
        assert_eq!(r.residuals[2], 1.0);
    }

    #[test]
    fn two_singletons_loss() {
        // residuals ±1 in one leaf: A = 2, B = 2
        let r = residuals_of(1, &[(&[0], &[1.0]), (&[0], &[-1.0])]);
        let id = WeightSpec::identity();
        let opts = SolveOptions::default();
        assert!((loss_q(&r, &id, &[1.0], &opts).unwrap() - 0.5).abs() < 1e-15);
        assert!((loss_train(&r, &id, &opts).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmin_table() {
        let c = RhoLossCurve::from_points(RhoStrategy::QShift, vec![(0.0, 1.0), (0.4, 0.7), (0.8, 0.9)]);
        assert_eq!(c.rho_hat, 0.4);
        let c = RhoLossCurve::from_points(RhoStrategy::QShift, vec![(-0.5, 1.0), (0.0, 2.0), (0.5, 1.0)]);
        assert_eq!(c.rho_hat, -0.5);
        let c = RhoLossCurve::from_points(RhoStrategy::QShift, vec![(-0.5, 1.0), (0.25, 1.0)]);
        assert_eq!(c.rho_hat, 0.25);
    }

    #[test]
    fn fixed_passthrough() {
        let r = residuals_of(1, &[(&[0, 0], &[1.0, -1.0])]);
        let c = estimate_rho(
            &r,
            WeightClass::Equicorrelated,
            WeightClass::Equicorrelated.default_range(),
            RhoStrategy::Fixed(0.3),
            None,
            33,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(c.rho_hat, 0.3);
    }

    #[test]
    fn moment_examples() {
        let equi = WeightClass::Equicorrelated;
        let range = equi.default_range();
        // residuals equal the responses here: leaf mean is 0
        let r = residuals_of(1, &[(&[0, 0], &[1.0, 1.0]), (&[0, 0], &[-1.0, -1.0])]);
        assert_eq!(moment_rho(&r, equi, range).unwrap(), 0.95);
        let r = residuals_of(1, &[(&[0, 0], &[1.0, -1.0]), (&[0, 0], &[-1.0, 1.0])]);
        assert_eq!(moment_rho(&r, equi, range).unwrap(), 0.0);
        let r = residuals_of(1, &[(&[0, 0], &[2.0, 2.0])]);
        assert_eq!(moment_rho(&r, equi, range).unwrap(), 0.0);
        let r = residuals_of(1, &[(&[0], &[1.0]), (&[0], &[2.0])]);
        assert!(matches!(moment_rho(&r, equi, range), Err(Error::Unidentifiable(_))));
    }

    #[test]
    fn engines_agree() {
        let r = residuals_of(
            3,
            &[
                (&[0, 1, 1, 2], &[1.0, 0.3, -0.2, 2.0]),
                (&[2, 2, 0], &[0.5, 1.5, -1.0]),
                (&[1, 0, 2, 1], &[0.1, 0.7, 1.1, -0.4]),
            ],
        );
        for class in [WeightClass::Equicorrelated, WeightClass::Ar1] {
            let base = LossEvaluator::new(&r, class, class.default_range(), SolveOptions { tol: 1e-13, max_iter: None });
            let w: &[f64] = &[0.2, 0.5, 0.3];
            for rho in [0.0, 0.3, 0.9] {
                let a = base.clone().with_engine(LossEngine::Dense).losses(rho, &[w]).unwrap()[0];
                let b = base.clone().with_engine(LossEngine::ConjugateGradient).losses(rho, &[w]).unwrap()[0];
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{class:?} {rho}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_masses_error() {
        let r = residuals_of(2, &[(&[0, 0], &[1.0, -1.0])]);
        let spec = WeightSpec::with_default_range(WeightClass::Equicorrelated, 0.5).unwrap();
        assert_eq!(loss_q(&r, &spec, &[0.0, 1.0], &SolveOptions::default()), Err(Error::ZeroMass));
    }
}
