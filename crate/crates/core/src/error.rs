use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid field axis: {0}")]
    InvalidAxis(String),

    #[error("capacity exceeded: {what} is {count}, cap is {cap}")]
    Capacity {
        what: &'static str,
        count: usize,
        cap: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("unsupported spin quantum number {0}")]
    UnsupportedSpin(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("crystalline fraction undefined: total spectral power is zero")]
    UndefinedFraction,

    #[error("gaussian fit failed after {iterations} iterations (gradient norm {gradient_norm:e}): {reason}")]
    FitFailure {
        iterations: usize,
        gradient_norm: f64,
        reason: String,
    },

    #[error("krylov step did not converge: t = {t:e}, substep = {substep:e}, error estimate = {estimate:e}")]
    KrylovStep { t: f64, substep: f64, estimate: f64 },

    #[error("runtime estimate {estimate_s:.1} s exceeds budget {budget_s:.1} s")]
    Budget { estimate_s: f64, budget_s: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error (line {line}): {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
