//! Conjugate learning toolkit.
//!
//! Fenchel-Young losses over constrained generating functions, small
//! feedforward networks with exact per-sample Jacobians, structure-matrix
//! spectra, and computable risk, fitting and generalization bounds.

// `!(a <= b)` is used on purpose so that NaN fails a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod config;
pub mod convex;
pub mod data;
pub mod error;
pub mod experiments;
pub mod info;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod output;
pub mod rng;
pub mod validate;

pub use error::{Error, Result};
