//! Dense arrays, small feed-forward networks and exact differentiation.

mod grad;
mod matrix;
mod network;
mod real;

pub use grad::{
    central_differences, finite_diff_grad, hvp, loss_and_grad, loss_value, relative_error,
    sgd_step, Batch, LossKind, LossSpec,
};
pub use matrix::{dot, norm, squared_distance, Matrix};
pub use network::{
    embed, forward_features, Activation, Head, Layer, LayoutEntry, NetworkSpec, ParamVector,
};
pub use real::{Dual, Real};

pub(crate) use network::{backward, forward_trace};

use crate::error::Result;

/// Network outputs for a batch (labels, if any, are ignored).
pub fn forward(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<Matrix> {
    forward_features(spec, params, &batch.features)
}
