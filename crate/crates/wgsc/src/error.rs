//! Error taxonomy for the engine.
//!
//! Numerical estimators distinguish *infrastructure* failures (bad inputs,
//! missing analytic data, exhausted node budgets) from *check* failures
//! (an identity not holding within tolerance). Only the former surface as
//! `EngineError`; check failures are data carried by reports.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    /// A point or coefficient vector does not match the model dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Basis-direction index outside `0..dim`.
    #[error("direction index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    /// Covariance spectra must be finite and strictly positive.
    #[error("invalid spectrum: {reason}")]
    InvalidSpectrum { reason: String },

    /// A parameter failed validation (named so callers can report precisely).
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Tensor quadrature would exceed the configured total-node budget.
    #[error(
        "node budget overflow: {nodes_per_dim} nodes in dimension {dim} needs {required} \
         evaluations (budget {budget})"
    )]
    NodeBudgetOverflow {
        nodes_per_dim: usize,
        dim: usize,
        required: u128,
        budget: u64,
    },

    /// An operation needed an analytic gradient that the field does not carry.
    #[error("missing gradient: {what}")]
    MissingGradient { what: String },

    /// An operation needed an analytic Hessian that the field does not carry.
    #[error("missing Hessian: {what}")]
    MissingHessian { what: String },

    /// Deterministic surface quadrature asked of a surface with no exact
    /// parametrization (or one outside its supported dimensions).
    #[error("no exact parametrization: {what}")]
    NoParametrization { what: String },

    /// The shell estimator saw too few samples in the thinnest band.
    #[error("band undersampled: {hits} hits in the thinnest shell (need >= {need})")]
    BandUndersampled { hits: u64, need: u64 },

    /// Quantile threshold selection failed (sub-level mass never exceeded 1/2).
    #[error("no admissible threshold: sub-level mass {mass} never exceeded 1/2")]
    NoAdmissibleThreshold { mass: f64 },

    /// The sub-level set has (empirically) zero mass, so boundary identities
    /// over it are vacuous and the run refuses to report them as checks.
    #[error("sub-level set has zero empirical mass ({hits} of {samples} samples)")]
    EmptySublevelSet { hits: u64, samples: u64 },

    /// Configuration file problems (missing fields, unknown kinds, bad JSON).
    #[error("config error: {0}")]
    Config(String),

    /// Unknown check id asked of the registry.
    #[error("unknown check id `{0}` (see `wgsc list-checks`)")]
    UnknownCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
