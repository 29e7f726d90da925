//! Error, coverage and normality summaries.

use crf_core::{ClusteredForest, CovariateShiftSpec};
use rand::Rng;

use super::dgp::Truth;

/// Mean squared prediction error `∫ (μ̂ − μ)² dQ`. Point masses and
/// empirical targets are exact; boxes use `n_eval` uniform draws.
pub fn evaluate_mspe<R: Rng + ?Sized>(
    forest: &ClusteredForest,
    truth: &Truth,
    shift: &CovariateShiftSpec,
    n_eval: usize,
    rng: &mut R,
) -> crf_core::Result<f64> {
    shift.validate(forest.dim)?;
    let d = forest.dim;
    let sq = |x: &[f64]| -> crf_core::Result<f64> {
        let e = forest.predict(x)?.mu_hat - truth.eval(x);
        Ok(e * e)
    };
    match shift {
        CovariateShiftSpec::PointMass { x } => sq(x),
        CovariateShiftSpec::Empirical { rows, .. } => {
            let mut s = 0.0;
            for x in rows.chunks_exact(d) {
                s += sq(x)?;
            }
            Ok(s / (rows.len() / d) as f64)
        }
        CovariateShiftSpec::UniformBox { lo, hi } => {
            if n_eval == 0 {
                return Err(crf_core::Error::InvalidConfig("n_eval must be positive".into()));
            }
            let mut x = vec![0.0; d];
            let mut s = 0.0;
            for _ in 0..n_eval {
                for f in 0..d {
                    x[f] = rng.random_range(lo[f]..=hi[f]);
                }
                s += sq(&x)?;
            }
            Ok(s / n_eval as f64)
        }
        CovariateShiftSpec::Training => Err(crf_core::Error::InvalidConfig(
            "pass training covariates as an empirical target to evaluate the training error".into(),
        )),
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample standard deviation (divisor `n − 1`).
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Fraction of intervals `[lo, hi]` that contain `truth`.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / intervals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test of `samples` against `N(0, 1)`.
/// The p-value uses the asymptotic Kolmogorov law with Stephens' small-sample
/// correction.
pub fn ks_normal(samples: &[f64]) -> KsResult {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = crf_core::stats::normal_cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    KsResult { statistic: d, p_value: kolmogorov_sf(lambda) }
}

/// `P(K > λ) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² λ²)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, StandardNormal};

    #[test]
    fn kolmogorov_tail_matches_tabulated_quantiles() {
        // 5% and 1% critical values of the limiting law
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_normal(&z).p_value > 0.01);
        let e = Exp::new(1.0).unwrap();
        let w: Vec<f64> = (0..500).map(|_| e.sample(&mut rng) - 1.0).collect();
        assert!(ks_normal(&w).p_value < 1e-6);
    }

    #[test]
    fn summaries() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(coverage(&[(0.0, 1.0), (2.0, 3.0)], 0.5), 0.5);
    }
}
