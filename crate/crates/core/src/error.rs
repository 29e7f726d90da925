use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// No clusters or no observations.
    EmptyInput,
    /// A dataset invariant does not hold.
    InvalidData(String),
    InvalidConfig(String),
    /// Correlation parameter outside its admissible range.
    RhoOutOfRange { rho: f64, lo: f64, hi: f64 },
    /// A covariate-shift target that cannot be evaluated on the partition.
    OutOfDomain(String),
    SizeLimit { n: usize, max: usize },
    /// Conjugate gradient hit its iteration cap; carries the best iterate.
    NonConvergence { iterations: usize, residual: f64, solution: Vec<f64> },
    /// No evaluation rows at all.
    EmptyDesign,
    /// The requested leaf has no rows in the design.
    EmptyLeaf(usize),
    /// Correlation cannot be identified from the residuals.
    Unidentifiable(&'static str),
    /// Every leaf carries zero target mass.
    ZeroMass,
    /// Little-bags variance needs at least two bags.
    InsufficientBags(usize),
    /// Variance estimates are unavailable for forests grown without honesty.
    VarianceUnavailable,
    AllTreesDegenerate,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyInput => write!(f, "empty input: no clusters or observations"),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::RhoOutOfRange { rho, lo, hi } => {
                write!(f, "correlation parameter {rho} outside admissible range [{lo}, {hi}]")
            }
            Error::OutOfDomain(msg) => write!(f, "out of domain: {msg}"),
            Error::SizeLimit { n, max } => write!(f, "size {n} exceeds limit {max}"),
            Error::NonConvergence { iterations, residual, .. } => write!(
                f,
                "conjugate gradient did not converge after {iterations} iterations (residual {residual:e})"
            ),
            Error::EmptyDesign => write!(f, "design has no rows"),
            Error::EmptyLeaf(m) => write!(f, "leaf {m} has no rows in the design"),
            Error::Unidentifiable(msg) => write!(f, "correlation unidentifiable: {msg}"),
            Error::ZeroMass => write!(f, "target distribution puts no mass on any occupied leaf"),
            Error::InsufficientBags(r) => write!(
                f,
                "variance estimation needs R >= 2 little bags, forest was fit with R = {r}"
            ),
            Error::VarianceUnavailable => write!(f, "variance estimation requires an honest forest"),
            Error::AllTreesDegenerate => write!(f, "every tree in the forest is degenerate"),
        }
    }
}

impl core::error::Error for Error {}
