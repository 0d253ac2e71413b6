//! Optimizer, staged training loop, metric logging, and checkpointing.

mod adamw;
mod checkpoint;
mod metrics;
mod train;

pub use adamw::{adamw_step, AdamwConfig, Moments};
pub use checkpoint::{Checkpoint, RngState, ScheduleCursor, FORMAT_VERSION, MAGIC};
pub use metrics::{MetricLog, MetricRecord, CSV_HEADER};
pub use train::{
    ablation_adaln, run_stages, train_step, LossBreakdown, StageConfig, StepSettings,
    TrainConfig, TrainSchedule, Trainer,
};
