use thiserror::Error;

/// Errors produced by the measure, transport, flow and certification layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("point {index} lies outside the domain")]
    OutsideDomain { index: usize },

    #[error("density is not normalized (integral = {integral})")]
    NotNormalized { integral: f64 },

    #[error("empty point set")]
    EmptySet,

    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid layouts differ")]
    GridMismatch,

    #[error("assignment size {n} exceeds cap {cap}; use the entropic solver for large ensembles")]
    AssignmentCapExceeded { n: usize, cap: usize },

    #[error("sinkhorn kernel underflow at epsilon = {epsilon}; use log-domain mode")]
    KernelUnderflow { epsilon: f64 },

    #[error("stale potentials: source marginal defect {defect} exceeds {tol}")]
    StalePotentials { defect: f64, tol: f64 },

    #[error("density below floor {floor} at cell {cell}")]
    DensityBelowFloor { cell: usize, floor: f64 },

    #[error("entropy requires a density surrogate (KDE or grid) for an empirical measure")]
    MissingSurrogate,

    #[error("quadrature grid spacing {spacing} is coarser than half the bandwidth {bandwidth}")]
    UndersampledConvolution { spacing: f64, bandwidth: f64 },

    #[error("non-finite position at step {step}")]
    NonFinite { step: usize },

    #[error("unstable integration at step {step}: particle left the inflated domain")]
    Unstable { step: usize },

    #[error("laguerre solver did not converge in {iterations} iterations (worst mass defect {defect})")]
    LaguerreNotConverged { iterations: usize, defect: f64 },

    #[error("coincident sites {0} and {1}")]
    CoincidentSites(usize, usize),

    #[error("stale diagram: {0}")]
    StaleDiagram(String),

    #[error("log too short: {len} points, need at least {min}")]
    LogTooShort { len: usize, min: usize },

    #[error("envelope fit rejected: {0}")]
    FitRejected(String),

    #[error("ensemble of {n} particles is too small for epsilon = {epsilon} (need n*epsilon >= 20)")]
    EnsembleTooSmall { n: usize, epsilon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
