//! Flat JSON configuration files and the command-line overlay.

use std::path::Path;

use crf_core::{ForestConfig, RhoStrategy, WeightClass};
use serde::{Deserialize, Serialize};

/// Every key is optional; unset keys keep the [`ForestConfig`] default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "s_I")]
    pub s_i: Option<usize>,
    pub s_corr: Option<usize>,
    pub k: Option<usize>,
    #[serde(rename = "B")]
    pub trees_per_bag: Option<usize>,
    #[serde(rename = "R")]
    pub bags: Option<usize>,
    pub beta: Option<f64>,
    pub alpha_split: Option<f64>,
    pub pi_frac: Option<f64>,
    pub honesty: Option<bool>,
    pub alpha_ci: Option<f64>,
    pub seed: Option<u64>,
    pub weight_class: Option<String>,
    /// `q_shift`, `train`, `moment` or `fixed`.
    pub rho_strategy: Option<String>,
    pub rho_fixed: Option<f64>,
    pub gamma_lo: Option<f64>,
    pub gamma_hi: Option<f64>,
    pub rho_grid: Option<usize>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub mtry: Option<usize>,
    pub dishonest_frac: Option<f64>,
    /// Simulation only: clusters per simulated dataset.
    pub n_clusters: Option<usize>,
    /// Simulation only: Monte Carlo draws per error evaluation.
    pub n_eval: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    /// Inconsistent settings; reported as a usage error.
    #[error("{0}")]
    Conflict(String),
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        ConfigFile { $($field: $top.$field.clone().or_else(|| $base.$field.clone()),)* }
    };
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
    }

    /// Values in `top` win; the strategy pair is resolved separately so a
    /// command-line `rho_fixed` can replace a file strategy.
    pub fn overlay(&self, top: &ConfigFile) -> Result<ConfigFile, ConfigError> {
        let base = self;
        let mut merged = overlay!(base, top;
            s_i, s_corr, k, trees_per_bag, bags, beta, alpha_split, pi_frac, honesty, alpha_ci, seed,
            weight_class, rho_strategy, rho_fixed, gamma_lo, gamma_hi, rho_grid, cg_tol, cg_max_iter,
            mtry, dishonest_frac, n_clusters, n_eval);
        top.strategy()?;
        if top.rho_strategy.is_some() || top.rho_fixed.is_some() {
            merged.rho_strategy = top.rho_strategy.clone();
            merged.rho_fixed = top.rho_fixed;
        }
        Ok(merged)
    }

    /// Strategy named by `rho_strategy` and `rho_fixed`, if any.
    pub fn strategy(&self) -> Result<Option<RhoStrategy>, ConfigError> {
        let conflict = |m: String| Err(ConfigError::Conflict(m));
        match (self.rho_strategy.as_deref(), self.rho_fixed) {
            (None, None) => Ok(None),
            (None, Some(r)) | (Some("fixed"), Some(r)) => Ok(Some(RhoStrategy::Fixed(r))),
            (Some("fixed"), None) => conflict("rho_strategy fixed needs a rho_fixed value".into()),
            (Some(s), fixed) => {
                let strategy = match s {
                    "q_shift" => RhoStrategy::QShift,
                    "train" => RhoStrategy::Train,
                    "moment" => RhoStrategy::Moment,
                    other => return conflict(format!("unknown rho_strategy {other:?}")),
                };
                if fixed.is_some() {
                    return conflict(format!("rho_fixed conflicts with rho_strategy {s}"));
                }
                Ok(Some(strategy))
            }
        }
    }

    pub fn forest_config(&self) -> Result<ForestConfig, ConfigError> {
        let d = ForestConfig::default();
        let weight_class = match self.weight_class.as_deref() {
            None => d.weight_class,
            Some(s) => WeightClass::parse(s)
                .ok_or_else(|| ConfigError::Conflict(format!("unknown weight_class {s:?}")))?,
        };
        Ok(ForestConfig {
            s_i: self.s_i,
            s_corr: self.s_corr,
            k: self.k.unwrap_or(d.k),
            trees_per_bag: self.trees_per_bag.unwrap_or(d.trees_per_bag),
            bags: self.bags.unwrap_or(d.bags),
            beta: self.beta,
            alpha_split: self.alpha_split.unwrap_or(d.alpha_split),
            pi_frac: self.pi_frac.unwrap_or(d.pi_frac),
            honesty: self.honesty.unwrap_or(d.honesty),
            alpha_ci: self.alpha_ci.unwrap_or(d.alpha_ci),
            seed: self.seed.unwrap_or(d.seed),
            weight_class,
            gamma_lo: self.gamma_lo,
            gamma_hi: self.gamma_hi,
            rho_strategy: self.strategy()?.unwrap_or(d.rho_strategy),
            rho_grid: self.rho_grid.unwrap_or(d.rho_grid),
            cg_tol: self.cg_tol.unwrap_or(d.cg_tol),
            cg_max_iter: self.cg_max_iter,
            mtry: self.mtry,
            dishonest_frac: self.dishonest_frac.unwrap_or(d.dishonest_frac),
        })
    }
}
