//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoxError {
    #[error("point (r={r}, phi={phi}) outside chart domain {domain}")]
    OutsideChart { r: f64, phi: f64, domain: String },

    #[error("metric degenerate or not positive definite at (r={r}, phi={phi}): det={det}, g_rr={g_rr}")]
    DegenerateMetric { r: f64, phi: f64, det: f64, g_rr: f64 },

    #[error("tensor rank mismatch: expected {expected}, got {got}")]
    RankMismatch { expected: usize, got: usize },

    #[error("unsupported rank {0} (supported ranks are 0..=3)")]
    UnsupportedRank(usize),

    #[error("near-tangent ray at the boundary: |<v,nu>| = {inner:.3e} below tolerance {tol:.1e}")]
    Tangency { inner: f64, tol: f64 },

    #[error("boundary component at r={r} is not strictly convex (k_g = {k_g:.6})")]
    NotStrictlyConvex { r: f64, k_g: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("orbit is not closed: return distance {dist:.3e} exceeds {tol:.1e}")]
    NotClosed { dist: f64, tol: f64 },

    #[error("conjugate gradient did not converge in {iters} iterations (relative residual {residual:.3e})")]
    CgDiverged { iters: usize, residual: f64, history: Vec<f64> },

    #[error("no boundary-to-boundary geodesic found in winding class {k}")]
    NoSolutionInClass { k: i64 },

    #[error("ambiguous shooting bracket for winding class {k}: candidate angles {angles:?}")]
    AmbiguousBracket { k: i64, angles: Vec<f64> },

    #[error("geodesic class lost along the metric family at tau = {tau}")]
    ClassLost { tau: f64 },

    #[error("gauge normalization did not converge: residual history {history:?}")]
    GaugeDiverged { history: Vec<f64> },

    #[error("discrete solenoidal basis is rank deficient")]
    RankDeficient,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("flow left the chart at (r={r}, phi={phi})")]
    LeftChart { r: f64, phi: f64 },

    #[error("unknown experiment id `{0}`")]
    UnknownExperiment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GeoxError>;
