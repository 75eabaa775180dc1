//! Surrogate forward and explicit backward, transform gradients and the
//! straight-through / EMA baselines.

mod baselines;
mod surrogate;
mod transform_grad;

pub use baselines::{ema_codebook_update, ste_forward_backward};
pub use surrogate::{
    accumulate_code_signals, backward_batch, jacobian_dense, surrogate_backward, surrogate_forward,
    SurrogateContext, SurrogateForm, SurrogateGrad,
};
pub use transform_grad::{grad_mixer_dense, grad_w_dense, transform_backward, TransformGrads};

use crate::numerics::Mat;
use crate::scalar::Scalar;

/// Everything one backward pass through quantizer and transform produces.
#[derive(Clone, Debug)]
pub struct GradBundle<T: Scalar> {
    /// Encoder gradients, `B × d`.
    pub grad_z: Mat<T>,
    /// Stacked per-code signals, `K × d`.
    pub g: Mat<T>,
    pub transform: TransformGrads<T>,
    /// Alignment scalars `a = ⟨g, v⟩` per sample.
    pub a_values: Vec<T>,
}
