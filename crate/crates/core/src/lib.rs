//! Hard-assignment vector quantization with a radius-based differentiable
//! surrogate, learnable codebook transforms and closed-form gradients.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiations.

// `!(x > 0.0)` is used on purpose so NaN fails the check; index loops read
// more clearly than zipped iterators in the dense kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod codebook;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod numerics;
pub mod quantizer;
pub mod radius;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Mat, Rng};
pub use radius::{eval_radius, RadiusEval, RadiusFamily, RadiusSpec};
pub use scalar::Scalar;

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type Radius64 = RadiusSpec<f64>;
