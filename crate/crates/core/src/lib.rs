//! Meta-learning under a labeling budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense networks over flat parameter vectors with exact
//!   reverse-mode gradients and Hessian-vector products.
//! - [`tasks`]: task sources, N-way K-shot episodes and the label ledger.
//! - [`adaptation`]: inner-loop gradient descent and prototype classifiers.
//! - [`meta`]: Reptile, MAML (first and second order), ProtoNets and FedAvg.
//! - [`active`]: k-means++ and entropy-weighted active label selection.
//! - [`bounds`]: stability-based meta-generalization bounds.

pub mod active;
pub mod adaptation;
pub mod bounds;
pub mod error;
pub mod meta;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
