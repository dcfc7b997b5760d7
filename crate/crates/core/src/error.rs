use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point violates the affine constraint (residual {residual:.3e})")]
    Infeasible { residual: f64 },

    #[error("constraint matrix is rank deficient (rank {rank} < {rows} rows)")]
    Rank { rank: usize, rows: usize },

    #[error("dual Newton solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("value out of range: {0}")]
    Range(String),

    #[error("missing key in grouping: {0}")]
    MissingKey(String),

    #[error("too many parameters for a dense Hessian: {m} > {limit}")]
    TooManyParameters { m: usize, limit: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no out-of-batch samples in any step (batch size equals dataset size)")]
    NoOutBatch,

    #[error("degenerate structure spectrum (lambda_min = {lambda_min:.3e})")]
    DegenerateSpectrum { lambda_min: f64 },

    #[error("model has not converged to the conditional mean (gap {gap:.3e})")]
    NotConverged { gap: f64 },

    #[error("zero-parameter model produced a nonzero output (max |f| = {max_abs:.3e})")]
    ZeroOutputViolation { max_abs: f64 },

    #[error("series lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    #[error("eigensolver failed to converge after {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("IDX magic mismatch: expected {expected:#010x}, found {found:#010x}")]
    MagicMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("no plottable series")]
    EmptySeries,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI for exit codes and machine-readable errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::Validation { .. } => "config",
            Error::Io { .. } | Error::MagicMismatch { .. } | Error::TruncatedFile(_) => "io",
            Error::Snapshot(_) => "io",
            _ => "numeric",
        }
    }
}
