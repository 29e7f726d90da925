//! Clustered random forests.
//!
//! Honest regression forests for grouped observations whose leaf values are
//! weighted least squares fits under a parametric working correlation
//! (equicorrelated or AR(1)). The working correlation parameter is chosen per
//! tree by minimising an estimate of the tree variance integrated against a
//! user-chosen target covariate distribution.
//!
//! The crate is `no_std` (with `alloc`). The `std` feature adds
//! `std::error::Error` plumbing through the rand crate, `parallel` fits trees on
//! a rayon pool, and `serde` derives (de)serialisation for every model type.

#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod dense;
pub mod error;
pub mod forest;
pub mod partition;
pub mod rho;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod weights;

pub use data::{BoundingBox, Cluster, ClusteredDataset, CovariateShiftSpec, ForestConfig, LeafMass, RhoStrategy};
pub use error::{Error, Result};
pub use forest::{ClusteredForest, ClusteredTree, IntervalEstimate, Prediction, Variant};
pub use partition::{SplitCandidate, TreePartition};
pub use rho::{PilotResiduals, RhoLossCurve};
pub use solver::{DesignAssembly, SolveOptions, SolveReport};
pub use weights::{RhoRange, WeightClass, WeightSpec};
