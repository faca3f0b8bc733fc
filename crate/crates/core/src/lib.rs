//! Numerical laboratory core for the correspondence between single-layer
//! attention and one-step gradient descent on an implicit reference model.
//!
//! The crate provides, in dependency order:
//!
//! - [`matrix`]: deterministic dense linear algebra (softmax, ridge solves,
//!   norms) on row-major [`matrix::DenseMatrix`] values;
//! - [`features`]: the softmax kernel `exp(xᵀy)`, plus finite feature maps
//!   (identity, exact-kernel, positive random features) standing in for its
//!   Mercer factorization;
//! - [`attention`]: linear and softmax attention next to their gradient-descent
//!   dual forms, with demonstration/query split diagnostics;
//! - [`distill`]: one-step distillation of a value-projection teacher into a
//!   feature-space student, and the identity matching the distilled weights to
//!   the attention dual's implicit initialization;
//! - [`bounds`]: empirical Rademacher complexity estimators and the resulting
//!   high-probability generalization bound, plus a held-out sup-gap probe;
//! - [`shift`]: mean-embedding (MMD) distances between token distributions and
//!   the offset / risk-gap bounds they imply under prompt shift;
//! - [`ranker`]: MMD-based scoring, ranking, and greedy selection of candidate
//!   prompt sets against a target distribution.
//!
//! All numeric code is generic over the floating-point [`Scalar`] type; the
//! aliases below fix the `f64` instantiations that the experiment harness and
//! most tests use.

pub mod attention;
pub mod bounds;
pub mod distill;
pub mod error;
pub mod features;
pub mod matrix;
pub mod ranker;
pub mod rng;
pub mod scalar;
pub mod shift;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default working matrix type (double precision).
pub type Matrix = matrix::DenseMatrix<f64>;
/// Double-precision feature map.
pub type FeatureMap = features::FeatureMap<f64>;
/// Double-precision token bundle for attention experiments.
pub type TokenMatrix = attention::TokenMatrix<f64>;
/// Double-precision attention weights.
pub type AttentionWeights = attention::AttentionWeights<f64>;
