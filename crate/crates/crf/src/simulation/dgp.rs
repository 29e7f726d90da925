//! Data-generating processes for the simulation studies.

use std::fmt;
use std::sync::Arc;

use crf_core::{Cluster, ClusteredDataset};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// Pairs in two dimensions with tanh additive mean and 0.8 error correlation.
    Intro2d,
    /// Groups of four, tanh mean, heteroscedastic equicorrelated errors.
    ShiftEquicorr,
    /// Groups of five, `4 sin x₁` mean, AR(2) errors.
    Ar2Inference,
    /// Pairs on `[0, 1]` with a ramp noise scale.
    Theorem2,
}

impl DgpKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intro_2d" => Some(DgpKind::Intro2d),
            "shift_equicorr" => Some(DgpKind::ShiftEquicorr),
            "ar2_inference" => Some(DgpKind::Ar2Inference),
            "theorem2" => Some(DgpKind::Theorem2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Intro2d => "intro_2d",
            DgpKind::ShiftEquicorr => "shift_equicorr",
            DgpKind::Ar2Inference => "ar2_inference",
            DgpKind::Theorem2 => "theorem2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub dim: usize,
    /// Within-cluster error correlation (equicorrelated kinds).
    pub corr: f64,
    /// AR(2) coefficients.
    pub ar: (f64, f64),
    /// Ramp height of the noise scale (`theorem2`).
    pub eta: f64,
    /// `[a₁, a₂]` and `[b₁, b₂]` (`theorem2`).
    pub a: (f64, f64),
    pub b: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid simulation settings: {0}")]
pub struct DgpError(pub String);

impl DgpSpec {
    pub fn new(kind: DgpKind, n_clusters: usize) -> Self {
        let base = DgpSpec {
            kind,
            n_clusters,
            cluster_size: 2,
            dim: 1,
            corr: 0.8,
            ar: (0.6, 0.3),
            eta: 4.0,
            a: (0.0, 0.25),
            b: (0.75, 1.0),
        };
        match kind {
            DgpKind::Intro2d => DgpSpec { dim: 2, ..base },
            DgpKind::ShiftEquicorr => DgpSpec { cluster_size: 4, ..base },
            DgpKind::Ar2Inference => DgpSpec { cluster_size: 5, ..base },
            DgpKind::Theorem2 => DgpSpec { corr: 0.5, ..base },
        }
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let bad = |m: &str| Err(DgpError(m.to_string()));
        if self.n_clusters == 0 || self.cluster_size == 0 || self.dim == 0 {
            return bad("cluster count, cluster size and dimension must be positive");
        }
        if !(self.corr > -1.0 && self.corr < 1.0) {
            return bad("correlation must lie in (-1, 1)");
        }
        match self.kind {
            DgpKind::ShiftEquicorr | DgpKind::Intro2d | DgpKind::Theorem2 => {
                // equicorrelation needs 1 + (n − 1)ϱ > 0
                if 1.0 + (self.cluster_size as f64 - 1.0) * self.corr <= 0.0 {
                    return bad("equicorrelation matrix is not positive definite");
                }
            }
            DgpKind::Ar2Inference => {
                let (p1, p2) = self.ar;
                if !(p1 + p2 < 1.0 && p2 - p1 < 1.0 && p2.abs() < 1.0) {
                    return bad("AR(2) coefficients are not stationary");
                }
            }
        }
        if self.kind == DgpKind::Theorem2 {
            let (a1, a2) = self.a;
            let (b1, b2) = self.b;
            if !(0.0 <= a1 && a1 < a2 && a2 < b1 && b1 < b2 && b2 <= 1.0) {
                return bad("need 0 <= a1 < a2 < b1 < b2 <= 1");
            }
            if !(self.eta > 0.0) {
                return bad("eta must be positive");
            }
            if self.dim != 1 {
                return bad("theorem2 covariates are one-dimensional");
            }
        }
        Ok(())
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        match self.kind {
            DgpKind::Intro2d => x[0].tanh() + x[1].tanh(),
            DgpKind::ShiftEquicorr => x[0].tanh(),
            DgpKind::Ar2Inference => 4.0 * x[0].sin(),
            DgpKind::Theorem2 => x[0],
        }
    }

    /// Conditional noise scale.
    pub fn sigma(&self, x: &[f64]) -> f64 {
        match self.kind {
            DgpKind::ShiftEquicorr => 0.25 + 1.0 / (1.0 + (4.0 * x[0]).exp()),
            DgpKind::Theorem2 => {
                let (_, a2) = self.a;
                let (b1, _) = self.b;
                let v = x[0];
                if v <= a2 {
                    1.0
                } else if v < b1 {
                    ((self.eta - 1.0) * v + (b1 - self.eta * a2)) / (b1 - a2)
                } else {
                    self.eta
                }
            }
            _ => 1.0,
        }
    }

    pub fn truth(&self) -> Truth {
        let spec = self.clone();
        Truth(Arc::new(move |x: &[f64]| spec.mean(x)))
    }

    fn covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let len = self.cluster_size * self.dim;
        match self.kind {
            DgpKind::Theorem2 => (0..len).map(|_| rng.random::<f64>()).collect(),
            _ => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    fn errors<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.cluster_size;
        match self.kind {
            DgpKind::Ar2Inference => {
                let (p1, p2) = self.ar;
                let g0 = (1.0 - p2) / ((1.0 + p2) * ((1.0 - p2) * (1.0 - p2) - p1 * p1));
                let g1 = p1 * g0 / (1.0 - p2);
                let mut e = Vec::with_capacity(n);
                let z0: f64 = rng.sample(StandardNormal);
                e.push(g0.sqrt() * z0);
                if n > 1 {
                    let z1: f64 = rng.sample(StandardNormal);
                    e.push(g1 / g0 * e[0] + (g0 - g1 * g1 / g0).sqrt() * z1);
                }
                for t in 2..n {
                    let u: f64 = rng.sample(StandardNormal);
                    e.push(p1 * e[t - 1] + p2 * e[t - 2] + u);
                }
                e
            }
            _ => {
                // z_j = √ϱ u + √(1−ϱ) e_j has unit variance and correlation ϱ
                let rho = self.corr;
                let shared: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        let own: f64 = rng.sample(StandardNormal);
                        rho.sqrt() * shared + (1.0 - rho).sqrt() * own
                    })
                    .collect()
            }
        }
    }

    /// One draw of the whole dataset.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ClusteredDataset, DgpError> {
        self.validate()?;
        if self.corr < 0.0 && self.kind != DgpKind::Ar2Inference {
            return Err(DgpError("negative equicorrelation is not supported by the shared-factor sampler".into()));
        }
        let clusters = (0..self.n_clusters)
            .map(|i| {
                let x = self.covariates(rng);
                let z = self.errors(rng);
                let y = x
                    .chunks_exact(self.dim)
                    .zip(&z)
                    .map(|(row, &zj)| self.mean(row) + self.sigma(row) * zj)
                    .collect();
                Cluster { id: format!("c{i}"), y, x }
            })
            .collect();
        ClusteredDataset::new(clusters, self.dim).map_err(|e| DgpError(e.to_string()))
    }

    /// Draws `n` covariate rows from the training covariate distribution.
    pub fn covariate_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n * self.dim)
            .map(|_| match self.kind {
                DgpKind::Theorem2 => rng.random::<f64>(),
                _ => rng.sample(StandardNormal),
            })
            .collect()
    }
}

type MeanFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Callable mean function that travels with a simulated dataset.
#[derive(Clone)]
pub struct Truth(Arc<MeanFn>);

impl Truth {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Truth(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Truth(..)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shift_noise_scale_at_zero() {
        let spec = DgpSpec::new(DgpKind::ShiftEquicorr, 10);
        assert!((spec.sigma(&[0.0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn equicorrelated_errors_have_target_correlation() {
        let spec = DgpSpec::new(DgpKind::ShiftEquicorr, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut s01, mut s00, mut s11) = (0.0, 0.0, 0.0);
        for _ in 0..100_000 {
            let z = spec.errors(&mut rng);
            s01 += z[0] * z[1];
            s00 += z[0] * z[0];
            s11 += z[1] * z[1];
        }
        let r = s01 / (s00 * s11).sqrt();
        assert!((r - 0.8).abs() < 0.02, "{r}");
    }

    #[test]
    fn ar2_lag_one_autocorrelation() {
        let spec = DgpSpec::new(DgpKind::Ar2Inference, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..40_000 {
            let e = spec.errors(&mut rng);
            for t in 0..4 {
                num += e[t] * e[t + 1];
            }
            den += e[..4].iter().map(|v| v * v).sum::<f64>();
        }
        let target = 0.6 / (1.0 - 0.3);
        assert!((num / den - target).abs() < 0.02, "{}", num / den);
    }

    #[test]
    fn ramp_is_continuous() {
        let spec = DgpSpec::new(DgpKind::Theorem2, 1);
        assert_eq!(spec.sigma(&[0.1]), 1.0);
        assert!((spec.sigma(&[0.25 + 1e-12]) - 1.0).abs() < 1e-9);
        assert!((spec.sigma(&[0.75 - 1e-12]) - 4.0).abs() < 1e-9);
        assert_eq!(spec.sigma(&[0.9]), 4.0);
    }

    #[test]
    fn non_stationary_ar_is_rejected() {
        let spec = DgpSpec { ar: (0.8, 0.3), ..DgpSpec::new(DgpKind::Ar2Inference, 5) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        for kind in [DgpKind::Intro2d, DgpKind::ShiftEquicorr, DgpKind::Ar2Inference, DgpKind::Theorem2] {
            let spec = DgpSpec::new(kind, 30);
            let a = spec.generate(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = spec.generate(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.n_obs(), 30 * spec.cluster_size);
        }
    }
}
