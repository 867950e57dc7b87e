//! Differentiable neural operations recorded on a [`Tape`](crate::autodiff::Tape).

pub mod activation;
pub mod basic;
pub mod conv;
pub mod norm;
pub mod pool;

pub use activation::{relu, sigmoid, sigmoid_scalar};
pub use basic::{add, concat_channels, mul, reduce, scale, sum_all, weighted_sum};
pub use conv::{conv3d, conv3d_forward, ConvSpec, Padding};
pub use norm::{batch_norm, layer_norm, NormParams, RunningStats};
pub use pool::{pool3d, upsample3d, PoolMode, PoolScope};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Reduction ratio of the channel-attention bottleneck.
pub const MLP_REDUCTION: usize = 8;

/// Hidden width of the shared MLP for `channels` inputs.
pub fn mlp_hidden(channels: usize) -> Result<usize> {
    if channels == 0 || !channels.is_multiple_of(MLP_REDUCTION) {
        return Err(Error::invalid(format!(
            "channel count {channels} is not divisible by the reduction ratio {MLP_REDUCTION}"
        )));
    }
    Ok(channels / MLP_REDUCTION)
}

/// `W1 · relu(W0 · f)` on pooled descriptors of shape `(N, 1, 1, 1, C)`.
///
/// `w0` is `(1, 1, 1, C, C/8)` and `w1` is `(1, 1, 1, C/8, C)`; no biases.
/// Calling this twice with the same weight nodes shares them, so their
/// gradients receive one contribution per call.
pub fn shared_mlp(tape: &mut Tape, f: Var, w0: Var, w1: Var) -> Result<Var> {
    let c = *tape
        .value(f)
        .dims()
        .last()
        .ok_or_else(|| Error::invalid("shared_mlp on a scalar"))?;
    let hidden = mlp_hidden(c)?;
    let h = conv3d(tape, f, w0, None, &ConvSpec::cubic(1, 1, c, hidden))?;
    let h = relu(tape, h)?;
    conv3d(tape, h, w1, None, &ConvSpec::cubic(1, 1, hidden, c))
}
