//! Encoder/decoder interface driven by the trainer.

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::scalar::Scalar;

/// A model wrapped around the quantizer: it encodes inputs to latents, scores
/// the decoder input and owns its own parameters and optimizer.
///
/// Training is split so that a step can be abandoned before any mutation:
/// [`backward`](LatentModel::backward) only stages gradients,
/// [`apply`](LatentModel::apply) commits them.
pub trait LatentModel<T: Scalar> {
    fn encode(&self, x: &Mat<T>) -> Result<Mat<T>>;

    /// Loss of reconstructing `x` from decoder input `q`, and `∂L/∂q`.
    fn decode_loss(&self, x: &Mat<T>, q: &Mat<T>) -> Result<(T, Mat<T>)>;

    /// Stages parameter gradients given the decoder upstream `grad_q` and the
    /// latent gradient `grad_z` returned by the quantizer.
    fn backward(&mut self, x: &Mat<T>, q: &Mat<T>, grad_q: &Mat<T>, grad_z: &Mat<T>) -> Result<()>;

    /// Whether the staged gradients are all finite.
    fn pending_finite(&self) -> bool;

    /// Applies the staged gradients.
    fn apply(&mut self) -> Result<()>;

    /// Norm of the staged gradients (0 for parameter-free models).
    fn grad_norm(&self) -> T {
        T::zero()
    }
}

/// The quantizer acting on raw inputs: `z = x` and `L = ½·mean_p ‖q_p − x_p‖²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DirectModel;

impl<T: Scalar> LatentModel<T> for DirectModel {
    fn encode(&self, x: &Mat<T>) -> Result<Mat<T>> {
        Ok(x.clone())
    }

    fn decode_loss(&self, x: &Mat<T>, q: &Mat<T>) -> Result<(T, Mat<T>)> {
        if x.shape() != q.shape() {
            return Err(Error::shape(
                "DirectModel::decode_loss",
                format!("{:?}", x.shape()),
                format!("{:?}", q.shape()),
            ));
        }
        let b = T::lit(x.rows().max(1) as f64);
        let diff = q.sub(x)?;
        let loss = diff.as_slice().iter().map(|&v| v * v).sum::<T>() / (T::lit(2.0) * b);
        Ok((loss, diff.scale(T::one() / b)))
    }

    fn backward(
        &mut self,
        _x: &Mat<T>,
        _q: &Mat<T>,
        _grad_q: &Mat<T>,
        _grad_z: &Mat<T>,
    ) -> Result<()> {
        Ok(())
    }

    fn pending_finite(&self) -> bool {
        true
    }

    fn apply(&mut self) -> Result<()> {
        Ok(())
    }
}
