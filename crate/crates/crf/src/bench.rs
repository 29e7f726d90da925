//! Timing ladder for the per-tree weighted leaf fit.

use std::io::Write;
use std::time::Instant;

use crf_core::partition::fit_partition;
use crf_core::rng::{stream, Stage};
use crf_core::solver::{assemble_design, fitted_leaf_values, SolveOptions};
use crf_core::{ForestConfig, WeightClass, WeightSpec};
use serde::Serialize;

use crate::simulation::{DgpKind, DgpSpec};

pub const LADDER: [usize; 3] = [10_000, 20_000, 40_000];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_obs: usize,
    pub n_leaves: usize,
    /// Median wall time of one evaluation-sample fit, in seconds.
    pub eval_secs: f64,
    pub cg_iterations: usize,
    pub repeats: usize,
}

/// For each `N`, grows a partition on `N` observations (groups of four,
/// `k = cfg.k`) and times design assembly plus the weighted leaf solve on
/// a separate `N`-observation evaluation sample at `rho`.
pub fn run_ladder(sizes: &[usize], cfg: &ForestConfig, rho: f64, repeats: usize, seed: u64) -> anyhow::Result<Vec<BenchRow>> {
    anyhow::ensure!(repeats >= 1, "repeats must be at least 1");
    let spec = WeightSpec::with_default_range(WeightClass::Equicorrelated, rho)?;
    let opts = SolveOptions { tol: cfg.cg_tol, max_iter: cfg.cg_max_iter };
    sizes
        .iter()
        .enumerate()
        .map(|(step, &n_obs)| {
            let dgp = DgpSpec::new(DgpKind::ShiftEquicorr, (2 * n_obs).div_ceil(4));
            let data = dgp.generate(&mut stream(seed, step as u64, 0, Stage::Simulation))?;
            let half = data.n_clusters() / 2;
            let split: Vec<usize> = (0..half).collect();
            let eval: Vec<usize> = (half..data.n_clusters()).collect();
            let (x, y) = data.gather(&split);
            let partition = fit_partition(&x, &y, data.dim(), cfg, &mut stream(seed, step as u64, 1, Stage::SplitNoise));
            let (_, y_eval) = data.gather(&eval);
            let mut times = Vec::with_capacity(repeats);
            let mut iterations = 0;
            for _ in 0..repeats {
                let t = Instant::now();
                let design = assemble_design(&partition, &data, &eval);
                let fit = fitted_leaf_values(&design, &spec, &y_eval, &opts)?;
                times.push(t.elapsed().as_secs_f64());
                iterations = fit.iterations;
            }
            times.sort_by(f64::total_cmp);
            Ok(BenchRow {
                n_obs: y_eval.len(),
                n_leaves: partition.n_leaves(),
                eval_secs: times[repeats / 2],
                cg_iterations: iterations,
                repeats,
            })
        })
        .collect()
}

pub fn write_rows<W: Write>(writer: W, rows: &[BenchRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_size() {
        let cfg = ForestConfig::default();
        let rows = run_ladder(&[400, 800], &cfg, 0.5, 2, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n_obs, 400);
        assert!(rows[1].n_leaves > rows[0].n_leaves);
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
