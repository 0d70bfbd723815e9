use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AudError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AudError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unstable: rho={rho}")]
    Unstable { rho: f64 },

    #[error("{0} has no density (point mass)")]
    NoDensity(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot parse {input:?}: expected {expected}")]
    Parse { input: String, expected: String },

    #[error("quadrature did not converge: estimated error {achieved:e} after {intervals} intervals")]
    Quadrature { achieved: f64, intervals: usize },

    #[error("{what} did not converge after {iterations} iterations (last={last}, residual={residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        last: f64,
        residual: f64,
    },

    #[error("simplex search exhausted {evaluations} evaluations (best f={best_f}, at {best_x:?})")]
    SimplexExhausted {
        evaluations: usize,
        best_x: Vec<f64>,
        best_f: f64,
    },

    #[error("inner minimization failed at c0={c0}: {source}")]
    Inner {
        c0: f64,
        #[source]
        source: Box<AudError>,
    },

    #[error("infeasible setup: {0}")]
    Setup(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("replication with seed {seed} stream {stream} failed: {source}")]
    Replication {
        seed: u64,
        stream: u64,
        #[source]
        source: Box<AudError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl AudError {
    /// Whether the error stems from bad user input rather than a numerical or
    /// runtime failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            AudError::InvalidParameter(_)
                | AudError::Unstable { .. }
                | AudError::NoDensity(_)
                | AudError::Domain(_)
                | AudError::Parse { .. }
                | AudError::Setup(_)
        )
    }
}
