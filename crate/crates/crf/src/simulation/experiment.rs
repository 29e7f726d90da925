//! Replicated experiments: interval coverage, covariate-shift error and the
//! direction of the shift-optimal correlation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context};
use crf_core::data::leaf_mass;
use crf_core::forest::{fit_forest_variants, Variant};
use crf_core::partition::fit_partition;
use crf_core::rho::{pilot_residuals, LossEvaluator};
use crf_core::rng::{stream, Stage};
use crf_core::solver::SolveOptions;
use crf_core::{ClusteredDataset, ClusteredForest, CovariateShiftSpec, ForestConfig, RhoStrategy};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::dgp::{DgpKind, DgpSpec, Truth};
use super::metrics::{coverage, evaluate_mspe, ks_normal, mean, median, std_dev};

/// Output of one method on one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodEstimate {
    pub point: f64,
    /// `(variance, lo, hi)` when the method reports an interval.
    pub interval: Option<(f64, f64, f64)>,
    pub rho_hat: Option<f64>,
}

/// Anything that turns a dataset into point estimates (and optionally
/// intervals) at a target point, one per named method.
pub trait TargetEstimator: Sync {
    fn methods(&self) -> Vec<String>;
    fn estimate(&self, data: &ClusteredDataset, target: &[f64], seed: u64) -> anyhow::Result<Vec<MethodEstimate>>;
}

/// Forest variants sharing subsets and partitions; each is one method.
pub struct ForestEstimator {
    pub config: ForestConfig,
    pub variants: Vec<(String, Variant)>,
}

impl ForestEstimator {
    /// Unweighted forest (`ρ = 0`) against the target-point CRF.
    pub fn rf_vs_crf(config: ForestConfig, target: &[f64]) -> Self {
        let point = CovariateShiftSpec::PointMass { x: target.to_vec() };
        ForestEstimator {
            config,
            variants: vec![
                ("RF".into(), Variant { strategy: RhoStrategy::Fixed(0.0), shift: point.clone() }),
                ("CRF".into(), Variant { strategy: RhoStrategy::QShift, shift: point }),
            ],
        }
    }
}

fn mean_rho(forest: &ClusteredForest) -> f64 {
    let (s, n) = forest.trees().fold((0.0, 0usize), |(s, n), t| (s + t.rho_hat, n + 1));
    s / n as f64
}

impl TargetEstimator for ForestEstimator {
    fn methods(&self) -> Vec<String> {
        self.variants.iter().map(|(n, _)| n.clone()).collect()
    }

    fn estimate(&self, data: &ClusteredDataset, target: &[f64], seed: u64) -> anyhow::Result<Vec<MethodEstimate>> {
        let cfg = ForestConfig { seed, ..self.config.clone() };
        let variants: Vec<Variant> = self.variants.iter().map(|(_, v)| v.clone()).collect();
        let forests = fit_forest_variants(data, &cfg, &variants)?;
        forests
            .iter()
            .map(|f| {
                let interval = if cfg.bags >= 2 {
                    let ci = f.confidence_interval(target, cfg.alpha_ci)?;
                    Some((ci.variance, ci.lo, ci.hi))
                } else {
                    None
                };
                Ok(MethodEstimate { point: f.predict(target)?.mu_hat, interval, rho_hat: Some(mean_rho(f)) })
            })
            .collect()
    }
}

/// One CSV row per replication and method. Unused columns stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RepRow {
    pub rep: usize,
    pub method: String,
    pub point: Option<f64>,
    pub variance: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub sq_error: Option<f64>,
    pub mspe_shift: Option<f64>,
    pub mspe_train: Option<f64>,
    pub rho_hat: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MethodSummary {
    pub name: String,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
    pub mse: Option<f64>,
    pub median_mspe_shift: Option<f64>,
    pub median_mspe_train: Option<f64>,
    pub mean_rho_hat: Option<f64>,
    /// KS p-value of the studentised point estimates against `N(0, 1)`.
    pub ks_p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub dgp: DgpSpec,
    pub reps: usize,
    pub seed: u64,
    pub config: ForestConfig,
    pub target: Option<Vec<f64>>,
    pub methods: Vec<MethodSummary>,
    /// Experiment-specific scalar outcomes.
    pub checks: BTreeMap<String, f64>,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub rows: Vec<RepRow>,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn rows_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a RepRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Writes `<path>` (JSON summary) and `<path stem>.reps.csv`.
    pub fn save(&self, path: &Path) -> anyhow::Result<std::path::PathBuf> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        let csv_path = path.with_extension("reps.csv");
        let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(csv_path)
    }
}

/// Seeds for replication `rep`: data draw, forest fit and evaluation draws.
fn rep_streams(seed: u64, rep: usize) -> (rand_chacha::ChaCha8Rng, u64, rand_chacha::ChaCha8Rng) {
    let data = stream(seed, rep as u64, 0, Stage::Simulation);
    let fit = stream(seed, rep as u64, 1, Stage::Simulation).random::<u64>();
    let eval = stream(seed, rep as u64, 2, Stage::Simulation);
    (data, fit, eval)
}

fn opt_mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn opt_median(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| median(&v))
}

/// Studentises by the replication mean and standard deviation, then applies
/// the KS test.
pub fn studentized_ks(points: &[f64]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let (m, s) = (mean(points), std_dev(points));
    if !(s > 0.0) {
        return None;
    }
    let z: Vec<f64> = points.iter().map(|p| (p - m) / s).collect();
    Some(ks_normal(&z).p_value)
}

/// `reps` independent datasets; each is handed to `estimator` and scored at
/// `target` against the true mean.
pub fn coverage_experiment(
    spec: &DgpSpec,
    estimator: &dyn TargetEstimator,
    config: &ForestConfig,
    target: &[f64],
    reps: usize,
    seed: u64,
) -> anyhow::Result<ExperimentReport> {
    ensure!(reps >= 1, "reps must be at least 1");
    ensure!(target.len() == spec.dim, "target has {} coordinates, the DGP has {}", target.len(), spec.dim);
    spec.validate()?;
    let start = Instant::now();
    let truth = spec.truth();
    let mu = truth.eval(target);
    let names = estimator.methods();
    let per_rep: Vec<Vec<RepRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> anyhow::Result<Vec<RepRow>> {
            let (mut data_rng, fit_seed, _) = rep_streams(seed, rep);
            let data = spec.generate(&mut data_rng)?;
            let est = estimator.estimate(&data, target, fit_seed)?;
            ensure!(est.len() == names.len(), "estimator returned {} results for {} methods", est.len(), names.len());
            Ok(names
                .iter()
                .zip(est)
                .map(|(name, e)| RepRow {
                    rep,
                    method: name.clone(),
                    point: Some(e.point),
                    variance: e.interval.map(|i| i.0),
                    lo: e.interval.map(|i| i.1),
                    hi: e.interval.map(|i| i.2),
                    sq_error: Some((e.point - mu) * (e.point - mu)),
                    rho_hat: e.rho_hat,
                    ..RepRow::default()
                })
                .collect())
        })
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<RepRow> = per_rep.into_iter().flatten().collect();
    let methods = names
        .iter()
        .map(|name| {
            let mine: Vec<&RepRow> = rows.iter().filter(|r| &r.method == name).collect();
            let intervals: Vec<(f64, f64)> = mine.iter().filter_map(|r| Some((r.lo?, r.hi?))).collect();
            let points: Vec<f64> = mine.iter().filter_map(|r| r.point).collect();
            MethodSummary {
                name: name.clone(),
                coverage: (!intervals.is_empty()).then(|| coverage(&intervals, mu)),
                mean_width: (!intervals.is_empty())
                    .then(|| mean(&intervals.iter().map(|(lo, hi)| hi - lo).collect::<Vec<_>>())),
                mse: opt_mean(mine.iter().map(|r| r.sq_error)),
                mean_rho_hat: opt_mean(mine.iter().map(|r| r.rho_hat)),
                ks_p_value: studentized_ks(&points),
                ..MethodSummary::default()
            }
        })
        .collect();
    let mut checks = BTreeMap::new();
    checks.insert("truth".into(), mu);
    Ok(ExperimentReport {
        experiment: "coverage".into(),
        dgp: spec.clone(),
        reps,
        seed,
        config: config.clone(),
        target: Some(target.to_vec()),
        methods,
        checks,
        runtime_secs: start.elapsed().as_secs_f64(),
        rows,
    })
}

/// Shifted and training-distribution prediction error of four variants:
/// the shift-targeted CRF, the unweighted forest, the training-loss CRF and
/// the training-targeted CRF.
pub fn shift_experiment(
    spec: &DgpSpec,
    config: &ForestConfig,
    shifted: &CovariateShiftSpec,
    reps: usize,
    n_eval: usize,
    seed: u64,
) -> anyhow::Result<ExperimentReport> {
    ensure!(reps >= 1 && n_eval >= 1, "reps and n_eval must be at least 1");
    spec.validate()?;
    shifted.validate(spec.dim)?;
    let start = Instant::now();
    let truth: Truth = spec.truth();
    let train = CovariateShiftSpec::Training;
    let variants = [
        ("CRF_shift", Variant { strategy: RhoStrategy::QShift, shift: shifted.clone() }),
        ("RF", Variant { strategy: RhoStrategy::Fixed(0.0), shift: train.clone() }),
        ("TRAIN", Variant { strategy: RhoStrategy::Train, shift: train.clone() }),
        ("CRF_train", Variant { strategy: RhoStrategy::QShift, shift: train }),
    ];
    let per_rep: Vec<Vec<RepRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> anyhow::Result<Vec<RepRow>> {
            let (mut data_rng, fit_seed, mut eval_rng) = rep_streams(seed, rep);
            let data = spec.generate(&mut data_rng)?;
            let cfg = ForestConfig { seed: fit_seed, ..config.clone() };
            let vs: Vec<Variant> = variants.iter().map(|(_, v)| v.clone()).collect();
            let forests = fit_forest_variants(&data, &cfg, &vs)?;
            // common evaluation draws across methods
            let shift_rows = match shifted {
                CovariateShiftSpec::UniformBox { lo, hi } => CovariateShiftSpec::Empirical {
                    rows: (0..n_eval)
                        .flat_map(|_| (0..spec.dim).map(|f| eval_rng.random_range(lo[f]..=hi[f])).collect::<Vec<_>>())
                        .collect(),
                    dim: spec.dim,
                },
                other => other.clone(),
            };
            let train_rows =
                CovariateShiftSpec::Empirical { rows: spec.covariate_rows(n_eval, &mut eval_rng), dim: spec.dim };
            variants
                .iter()
                .zip(&forests)
                .map(|((name, _), f)| {
                    Ok(RepRow {
                        rep,
                        method: (*name).into(),
                        mspe_shift: Some(evaluate_mspe(f, &truth, &shift_rows, n_eval, &mut eval_rng)?),
                        mspe_train: Some(evaluate_mspe(f, &truth, &train_rows, n_eval, &mut eval_rng)?),
                        rho_hat: Some(mean_rho(f)),
                        ..RepRow::default()
                    })
                })
                .collect()
        })
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<RepRow> = per_rep.into_iter().flatten().collect();
    let methods = variants
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&RepRow> = rows.iter().filter(|r| r.method == *name).collect();
            MethodSummary {
                name: (*name).into(),
                median_mspe_shift: opt_median(mine.iter().map(|r| r.mspe_shift)),
                median_mspe_train: opt_median(mine.iter().map(|r| r.mspe_train)),
                mean_rho_hat: opt_mean(mine.iter().map(|r| r.rho_hat)),
                ..MethodSummary::default()
            }
        })
        .collect();
    Ok(ExperimentReport {
        experiment: "shift".into(),
        dgp: spec.clone(),
        reps,
        seed,
        config: config.clone(),
        target: None,
        methods,
        checks: BTreeMap::new(),
        runtime_secs: start.elapsed().as_secs_f64(),
        rows,
    })
}

/// Single-tree comparison of the correlation chosen for `Q₁ = Unif[a]` and
/// `Q₂ = Unif[b]`. Clusters are split in thirds: partition, correlation
/// estimation and an independent holdout on which the `Q₁` loss of both
/// choices is re-evaluated.
pub fn theorem2_experiment(
    spec: &DgpSpec,
    config: &ForestConfig,
    reps: usize,
    seed: u64,
) -> anyhow::Result<ExperimentReport> {
    ensure!(spec.kind == DgpKind::Theorem2, "theorem2_experiment needs the theorem2 DGP");
    ensure!(reps >= 1, "reps must be at least 1");
    ensure!(spec.n_clusters >= 3, "need at least three clusters");
    spec.validate()?;
    let start = Instant::now();
    let q1 = CovariateShiftSpec::UniformBox { lo: vec![spec.a.0], hi: vec![spec.a.1] };
    let q2 = CovariateShiftSpec::UniformBox { lo: vec![spec.b.0], hi: vec![spec.b.1] };
    let range = config.rho_range();
    let solve = SolveOptions { tol: config.cg_tol, max_iter: config.cg_max_iter };
    let third = spec.n_clusters / 3;
    let per_rep: Vec<Vec<RepRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> anyhow::Result<Vec<RepRow>> {
            let (mut data_rng, fit_seed, _) = rep_streams(seed, rep);
            let data = spec.generate(&mut data_rng)?;
            let split: Vec<usize> = (0..third).collect();
            let corr: Vec<usize> = (third..2 * third).collect();
            let hold: Vec<usize> = (2 * third..3 * third).collect();
            let (x, y) = data.gather(&split);
            let mut rng = stream(fit_seed, 0, 0, Stage::SplitNoise);
            let partition = fit_partition(&x, &y, 1, config, &mut rng);
            let m1 = leaf_mass(&q1, &partition, None, None)?.masses;
            let m2 = leaf_mass(&q2, &partition, None, None)?.masses;
            let res = pilot_residuals(&partition, &data, &corr);
            let curves = LossEvaluator::new(&res, config.weight_class, range, solve).curves(
                config.rho_grid,
                &[&m1, &m2],
                &[RhoStrategy::QShift, RhoStrategy::QShift],
            )?;
            let held = pilot_residuals(&partition, &data, &hold);
            let held_eval = LossEvaluator::new(&held, config.weight_class, range, solve);
            let mut out = Vec::new();
            for (name, curve) in ["Q1", "Q2"].iter().zip(&curves) {
                let loss = held_eval.losses(curve.rho_hat, &[&m1])?[0];
                out.push(RepRow {
                    rep,
                    method: (*name).into(),
                    rho_hat: Some(curve.rho_hat),
                    loss: Some(loss),
                    ..RepRow::default()
                });
            }
            Ok(out)
        })
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<RepRow> = per_rep.into_iter().flatten().collect();
    let pairs: Vec<(&RepRow, &RepRow)> = rows.chunks_exact(2).map(|c| (&c[0], &c[1])).collect();
    let frac = |f: &dyn Fn(&RepRow, &RepRow) -> bool| pairs.iter().filter(|(a, b)| f(a, b)).count() as f64 / reps as f64;
    let mut checks = BTreeMap::new();
    checks.insert("frac_rho_q2_gt_q1".into(), frac(&|a, b| b.rho_hat > a.rho_hat));
    checks.insert("frac_q1_loss_worse_at_q2_choice".into(), frac(&|a, b| b.loss > a.loss));
    let eta = spec.eta;
    checks.insert("rho_star_q1".into(), (1.0 + eta) / (1.0 + eta * eta) * spec.corr);
    checks.insert("rho_star_q2".into(), eta * (1.0 + eta) / (1.0 + eta * eta) * spec.corr);
    let methods = ["Q1", "Q2"]
        .iter()
        .map(|name| MethodSummary {
            name: (*name).into(),
            mean_rho_hat: opt_mean(rows.iter().filter(|r| r.method == *name).map(|r| r.rho_hat)),
            ..MethodSummary::default()
        })
        .collect();
    Ok(ExperimentReport {
        experiment: "theorem2".into(),
        dgp: spec.clone(),
        reps,
        seed,
        config: config.clone(),
        target: None,
        methods,
        checks,
        runtime_secs: start.elapsed().as_secs_f64(),
        rows,
    })
}
