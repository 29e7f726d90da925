//! Working-correlation weight classes.
//!
//! Each class defines a per-cluster weight matrix `W(rho)` of size `n x n`:
//!
//! * identity: `W = I`;
//! * equicorrelated: `W = ((1 - rho) I + rho 11')^{-1}`, applied through its
//!   Sherman-Morrison form `(1 - rho)^{-1} (I - c 11')` with
//!   `c = rho / (1 + (n - 1) rho)`;
//! * AR(1): the tridiagonal matrix with diagonal `1` at both ends, `1 + rho^2`
//!   in the interior and `-rho` off the diagonal (`1 - rho^2` when `n = 1`),
//!   which is `(1 - rho^2)` times the inverse AR(1) correlation matrix.
//!
//! All matrix-vector products run in `O(n)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WeightClass {
    Identity,
    Equicorrelated,
    Ar1,
}

impl WeightClass {
    /// Widest admissible range for the class.
    pub fn default_range(self) -> RhoRange {
        match self {
            WeightClass::Identity => RhoRange { lo: 0.0, hi: 0.0 },
            WeightClass::Equicorrelated => RhoRange { lo: 0.0, hi: 0.95 },
            WeightClass::Ar1 => RhoRange { lo: -0.95, hi: 0.95 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightClass::Identity => "identity",
            WeightClass::Equicorrelated => "equicorrelated",
            WeightClass::Ar1 => "ar1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(WeightClass::Identity),
            "equicorrelated" | "exchangeable" => Some(WeightClass::Equicorrelated),
            "ar1" => Some(WeightClass::Ar1),
            _ => None,
        }
    }
}

/// Closed interval of admissible correlation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RhoRange {
    pub lo: f64,
    pub hi: f64,
}

impl RhoRange {
    pub fn contains(&self, rho: f64) -> bool {
        rho >= self.lo && rho <= self.hi
    }

    pub fn clamp(&self, rho: f64) -> f64 {
        rho.max(self.lo).min(self.hi)
    }

    /// `points` equally spaced values from `lo` to `hi` inclusive.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        if points <= 1 || self.hi == self.lo {
            return vec![self.clamp(0.0)];
        }
        let step = (self.hi - self.lo) / (points - 1) as f64;
        (0..points)
            .map(|i| if i + 1 == points { self.hi } else { self.lo + step * i as f64 })
            .collect()
    }
}

/// A weight class together with a correlation value and its admissible range.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightSpec {
    class: WeightClass,
    rho: f64,
    range: RhoRange,
}

impl WeightSpec {
    pub fn new(class: WeightClass, rho: f64, range: RhoRange) -> Result<Self> {
        let widest = class.default_range();
        if !(range.lo <= range.hi) || range.lo < widest.lo || range.hi > widest.hi {
            return Err(Error::InvalidConfig(alloc::format!(
                "range [{}, {}] is not inside [{}, {}] for {} weights",
                range.lo,
                range.hi,
                widest.lo,
                widest.hi,
                class.name()
            )));
        }
        if !range.contains(rho) {
            return Err(Error::RhoOutOfRange { rho, lo: range.lo, hi: range.hi });
        }
        Ok(WeightSpec { class, rho, range })
    }

    /// Spec with the class's widest range.
    pub fn with_default_range(class: WeightClass, rho: f64) -> Result<Self> {
        WeightSpec::new(class, rho, class.default_range())
    }

    pub fn identity() -> Self {
        WeightSpec { class: WeightClass::Identity, rho: 0.0, range: RhoRange { lo: 0.0, hi: 0.0 } }
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        WeightSpec::new(self.class, rho, self.range)
    }

    pub fn class(&self) -> WeightClass {
        self.class
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn range(&self) -> RhoRange {
        self.range
    }

    /// True when `W(rho)` is the identity for every cluster size.
    pub fn is_identity(&self) -> bool {
        self.class == WeightClass::Identity || self.rho == 0.0
    }
}

/// `out = W(rho) v` for a cluster of size `v.len()`.
pub fn weight_matvec(spec: &WeightSpec, v: &[f64], out: &mut [f64]) {
    let n = v.len();
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    let rho = spec.rho;
    match spec.class {
        WeightClass::Identity => out.copy_from_slice(v),
        WeightClass::Equicorrelated => {
            let scale = 1.0 / (1.0 - rho);
            let c = rho / (1.0 + (n as f64 - 1.0) * rho);
            let shift = c * v.iter().sum::<f64>();
            for (o, &vi) in out.iter_mut().zip(v) {
                *o = scale * (vi - shift);
            }
        }
        WeightClass::Ar1 => {
            if n == 1 {
                out[0] = (1.0 - rho * rho) * v[0];
                return;
            }
            let interior = 1.0 + rho * rho;
            out[0] = v[0] - rho * v[1];
            for j in 1..n - 1 {
                out[j] = interior * v[j] - rho * (v[j - 1] + v[j + 1]);
            }
            out[n - 1] = v[n - 1] - rho * v[n - 2];
        }
    }
}

/// Largest cluster size accepted by [`weight_dense`].
pub const DENSE_LIMIT: usize = 512;

/// Explicit `n x n` weight matrix, row-major.
pub fn weight_dense(spec: &WeightSpec, n: usize) -> Result<Vec<f64>> {
    if n > DENSE_LIMIT {
        return Err(Error::SizeLimit { n, max: DENSE_LIMIT });
    }
    let mut w = vec![0.0; n * n];
    let rho = spec.rho;
    match spec.class {
        WeightClass::Identity => {
            for j in 0..n {
                w[j * n + j] = 1.0;
            }
        }
        WeightClass::Equicorrelated => {
            let scale = 1.0 / (1.0 - rho);
            let c = rho / (1.0 + (n as f64 - 1.0) * rho);
            for j in 0..n {
                for k in 0..n {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    w[j * n + k] = scale * (delta - c);
                }
            }
        }
        WeightClass::Ar1 => {
            if n == 1 {
                w[0] = 1.0 - rho * rho;
            } else {
                for j in 0..n {
                    w[j * n + j] = if j == 0 || j == n - 1 { 1.0 } else { 1.0 + rho * rho };
                    if j + 1 < n {
                        w[j * n + j + 1] = -rho;
                        w[(j + 1) * n + j] = -rho;
                    }
                }
            }
        }
    }
    Ok(w)
}

/// Diagonal dominance margin `min_j (W_jj - sum_{k != j} |W_jk|)`, closed form.
pub fn dominance_margin(spec: &WeightSpec, n: usize) -> f64 {
    let rho = spec.rho;
    match spec.class {
        WeightClass::Identity => 1.0,
        WeightClass::Equicorrelated => {
            let (diag, off) = equicorrelated_entries(rho, n);
            diag - (n as f64 - 1.0) * off.abs()
        }
        WeightClass::Ar1 => {
            let a = rho.abs();
            match n {
                0 | 1 => 1.0 - rho * rho,
                2 => 1.0 - a,
                _ => (1.0 - a) * (1.0 - a),
            }
        }
    }
}

/// Maximum absolute column sum `||W||_1`, closed form.
pub fn norm_one(spec: &WeightSpec, n: usize) -> f64 {
    let rho = spec.rho;
    match spec.class {
        WeightClass::Identity => 1.0,
        WeightClass::Equicorrelated => {
            let (diag, off) = equicorrelated_entries(rho, n);
            diag.abs() + (n as f64 - 1.0) * off.abs()
        }
        WeightClass::Ar1 => {
            let a = rho.abs();
            match n {
                0 | 1 => 1.0 - rho * rho,
                2 => 1.0 + a,
                _ => (1.0 + a) * (1.0 + a),
            }
        }
    }
}

fn equicorrelated_entries(rho: f64, n: usize) -> (f64, f64) {
    let scale = 1.0 / (1.0 - rho);
    let c = rho / (1.0 + (n.max(1) as f64 - 1.0) * rho);
    (scale * (1.0 - c), -scale * c)
}
