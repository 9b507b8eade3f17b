//! Optimization, scheduling, checkpoints and the cross-validation driver.

mod adam;
mod checkpoint;
mod crossval;
mod metrics;
mod schedule;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    config_path, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint, MAGIC,
    VERSION,
};
pub use crossval::{cross_validate, cross_validate_folds, CrossValidation, FoldResult};
pub use metrics::MetricsLog;
pub use schedule::{Action, DecayMode, Schedule, ScheduleTracker};
pub use trainer::{evaluate, train, Evaluation, TrainConfig, TrainOutcome, DESK_LEARNING_RATE};
