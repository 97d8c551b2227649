//! Deep adaptive sampling for surrogate modeling of parametric differential
//! equations without labeled data.
//!
//! A surrogate network is trained on a pointwise equation-residual loss while
//! a normalizing flow learns the residual-induced distribution over the joint
//! spatial–parametric domain. Each adaptivity stage the flow supplies fresh
//! collocation points where the residual is large, shrinking the statistical
//! error of the Monte Carlo loss for a fixed sample budget.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode engine with one forward-mode input
//!   derivative threaded through (the residual contains du/dx).
//! - [`nets`]: surrogate architectures (plain MLP, branch–trunk composite)
//!   and hard-constraint ansatz wrappers.
//! - [`flow`]: the invertible density model over an enlarged box, with exact
//!   log-determinants, sampling by inversion, and cross-entropy training.
//! - [`problems`]: residual definitions and reference oracles for the
//!   bundled benchmarks.
//! - [`sampling`]: uniform/Halton/RAR/flow-driven collocation generation and
//!   training-set refinement.
//! - [`trainer`]: loss assembly, Adam, validation metrics, and the adaptive
//!   loops (joint and marginal) plus matched-budget baselines.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod nets;
pub mod parallel;
pub mod problems;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
