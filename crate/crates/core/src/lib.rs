//! Core library for probing universal-approximation properties of
//! Transformer-style networks: token matrices, permutation groups, sparsity
//! patterns, attention kernels, token mixers and residual feed-forward stacks,
//! together with differentiable evaluation, token-distinguishability checks
//! and interpolation by gradient descent.

pub mod diffeval;
pub mod distinguish;
pub mod error;
pub mod feedforward;
pub mod groups;
pub mod interpolate;
pub mod kernels;
pub mod mixers;
pub mod rng;
pub mod sparsity;
pub mod tokens;

pub use error::{Error, Result};
pub use tokens::TokenMatrix;
