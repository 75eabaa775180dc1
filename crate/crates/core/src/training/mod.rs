//! Training protocols, optimizer, usage monitoring and codebook maintenance.

mod adam;
mod config;
mod model;
mod trainer;
mod usage;

pub use adam::{adam_update, OptState, BETA1, BETA2, EPS};
pub use config::{DecoderInput, Protocol, TrainConfig};
pub use model::{DirectModel, LatentModel};
pub use trainer::{evaluate_codebook, EvalReport, QuantizerKind, StepReport, Trainer};
pub use usage::{
    compute_stats, dead_code_reset, histogram_summary, usage_regularizer, Reservoir, UsageStats,
    UsageTracker,
};
