//! Independent verification oracles: central finite differences through the
//! quantization pipeline, boundary filtering and gap-contraction scaling.

mod contraction;
mod fd;
mod pipeline;

pub use contraction::{
    contraction_experiment, contraction_residual, ContractionReport, DEFAULT_ETAS,
};
pub use fd::{fd_gradient, rel_err, FdConfig, Stencil, REL_FLOOR};
pub use pipeline::{
    check_pipeline_gradients, check_transform_gradients, random_radius, random_transform,
    GradReport, GradTarget,
};
