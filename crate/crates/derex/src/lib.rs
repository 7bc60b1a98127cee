//! SVD-based representation learning and pseudo-count exploration on
//! gridworld-scale problems, with numerical verifier suites for the
//! identities the method rests on.

pub mod env;
pub mod matrix;
pub mod nn;
pub mod stats;
pub mod tabular;

pub use matrix::{eig_real, pinv, svd, weighted_norm_sq, EigResult, Matrix, MatrixError, SvdResult};
