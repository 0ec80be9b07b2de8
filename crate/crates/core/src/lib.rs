//! Solvers and an experiment harness for noisy blind deconvolution under the
//! subspace model: recover the rank-one matrix `h* x*^H` from
//! `y_j = b_j^H h* x*^H a_j + ξ_j`, `j = 1..m`, where `a_j` are complex Gaussian
//! and `b_j^H` are rows of a partial DFT.
//!
//! Two estimators are provided:
//!
//! * [`ncvx`]: spectral initialization + balanced Wirtinger gradient descent on
//!   the factored objective;
//! * [`cvx`]: nuclear-norm regularized least squares on the lifted matrix,
//!   solved by proximal gradient.
//!
//! [`experiments`] drives the noise sweeps, convergence studies and
//! leave-one-out diagnostics exposed by the `bdeconv` binary.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cvx;
pub mod error;
pub mod experiments;
pub mod linops;
pub mod metrics;
pub mod model;
pub mod ncvx;

pub use error::{Error, Result};
