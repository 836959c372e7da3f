//! Bayesian covariance estimation with diagonally scaled inverse-Wishart
//! and matrix-F priors.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod priors;
pub mod randmat;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, PdMatrix};
