//! Probe training: AdamW with decoupled weight decay under a cosine schedule.

mod adamw;
mod schedule;
mod trainer;

pub use adamw::{adamw_update, AdamW, AdamWConfig};
pub use schedule::cosine_lr;
pub use trainer::{log_jsonl, model_config_for, train, training_records, EpochRecord, TrainConfig, TrainRun};
