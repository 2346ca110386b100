//! The joint training loop: schedule, per-step updates, and the epoch
//! driver with metrics history and checkpointing.

pub mod run;
pub mod schedule;
pub mod step;

pub use run::{history_csv, train, EpochRow, TrainConfig, TrainMode, TrainOutput, METRICS_HEADER};
pub use schedule::TrainSchedule;
pub use step::{accumulate_step, train_step, StepReport};
