//! Training loop, optimizer, metrics and non-learned baselines.

mod adam;
mod baselines;
pub mod metrics;
mod trainer;

pub use adam::{AdamConfig, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LR};
pub use baselines::{cg_sense, zero_filled, CG_SENSE_ITERS, CG_SENSE_LAMBDA};
pub use metrics::{psnr, ssim, AggregateMetrics, CaseMetrics, MetricsReport};
pub use trainer::{
    reconstruct, train_loop, validate, write_log, LogRow, Prepared, StepReport, TrainConfig, TrainOutcome, Trainer,
    Validation, BEST_CHECKPOINT_DIR, LOG_FILE,
};
