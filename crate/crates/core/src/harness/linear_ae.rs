//! Linear autoencoder with explicit gradients.

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::scalar::Scalar;
use crate::training::{adam_update, LatentModel, OptState};

/// `z = x W_e`, `x̂ = q W_d`, `L = ½·mean_p ‖x̂_p − x_p‖²`.
#[derive(Clone, Debug)]
pub struct LinearAutoencoder<T: Scalar> {
    /// Encoder, `D × d`.
    pub we: Mat<T>,
    /// Decoder, `d × D`.
    pub wd: Mat<T>,
    pub lr: T,
    opt_e: OptState<T>,
    opt_d: OptState<T>,
    pending: Option<(Mat<T>, Mat<T>)>,
}

impl<T: Scalar> LinearAutoencoder<T> {
    /// Weights drawn `N(0, 1/D)` for the encoder and `N(0, 1/d)` for the decoder.
    pub fn new(ambient: usize, latent: usize, lr: f64, rng: &mut Rng) -> Self {
        let we = rng
            .normal_mat::<T>(ambient, latent)
            .scale(T::lit(1.0 / (ambient as f64).sqrt()));
        let wd = rng
            .normal_mat::<T>(latent, ambient)
            .scale(T::lit(1.0 / (latent as f64).sqrt()));
        Self::from_weights(we, wd, lr)
    }

    pub fn from_weights(we: Mat<T>, wd: Mat<T>, lr: f64) -> Self {
        Self {
            opt_e: OptState::like(&we),
            opt_d: OptState::like(&wd),
            we,
            wd,
            lr: T::lit(lr),
            pending: None,
        }
    }

    /// Staged `(∂L/∂W_e, ∂L/∂W_d)`.
    pub fn pending(&self) -> Option<&(Mat<T>, Mat<T>)> {
        self.pending.as_ref()
    }

    fn residual(&self, x: &Mat<T>, q: &Mat<T>) -> Result<Mat<T>> {
        let xr = q.matmul(&self.wd)?;
        if xr.shape() != x.shape() {
            return Err(Error::shape(
                "LinearAutoencoder",
                format!("{:?}", x.shape()),
                format!("{:?}", xr.shape()),
            ));
        }
        xr.sub(x)
    }
}

impl<T: Scalar> LatentModel<T> for LinearAutoencoder<T> {
    fn encode(&self, x: &Mat<T>) -> Result<Mat<T>> {
        x.matmul(&self.we)
    }

    fn decode_loss(&self, x: &Mat<T>, q: &Mat<T>) -> Result<(T, Mat<T>)> {
        let r = self.residual(x, q)?;
        let b = T::lit(x.rows().max(1) as f64);
        let loss = r.as_slice().iter().map(|&v| v * v).sum::<T>() / (T::lit(2.0) * b);
        let grad_q = r.matmul_t(&self.wd)?.scale(T::one() / b);
        Ok((loss, grad_q))
    }

    fn backward(
        &mut self,
        x: &Mat<T>,
        q: &Mat<T>,
        _grad_q: &Mat<T>,
        grad_z: &Mat<T>,
    ) -> Result<()> {
        let b = T::lit(x.rows().max(1) as f64);
        let r = self.residual(x, q)?.scale(T::one() / b);
        let gd = q.t_matmul(&r)?;
        let ge = x.t_matmul(grad_z)?;
        self.pending = Some((ge, gd));
        Ok(())
    }

    fn pending_finite(&self) -> bool {
        self.pending
            .as_ref()
            .is_none_or(|(a, b)| a.is_finite() && b.is_finite())
    }

    fn apply(&mut self) -> Result<()> {
        if let Some((ge, gd)) = self.pending.take() {
            adam_update(&mut self.opt_e, &mut self.we, &ge, self.lr, T::zero())?;
            adam_update(&mut self.opt_d, &mut self.wd, &gd, self.lr, T::zero())?;
        }
        Ok(())
    }

    fn grad_norm(&self) -> T {
        self.pending.as_ref().map_or(T::zero(), |(a, b)| {
            (a.frobenius().powi(2) + b.frobenius().powi(2)).sqrt()
        })
    }
}
