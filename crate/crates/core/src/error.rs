// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an empty collection where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// The Sinkhorn iterations stopped before the marginals were satisfied.
    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Regression design matrix is rank deficient.
    #[error("degenerate design: {0}")]
    DegenerateDesign(&'static str),

    /// A configuration value is out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A dataset does not contain the classes a partition scheme needs.
    #[error("partition error: {0}")]
    Partition(String),

    /// No natural representation carries the requested variable values.
    #[error("no counterfactual-latent vector for key (x1={x1}, x2={x2})")]
    MissingCl { x1: f64, x2: f64 },

    /// Cosine similarity with a zero-norm vector.
    #[error("cosine undefined for zero-norm vector")]
    CosineUndefined,

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(&'static str),

    /// A class referenced by an audit has no natural samples.
    #[error("class {0} has no natural samples")]
    MissingClass(usize),

    /// Malformed checkpoint, circuit or dataset file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got,
            context,
        })
    }
}
