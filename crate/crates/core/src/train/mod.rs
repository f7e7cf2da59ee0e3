//! Optimizers, run configuration and the two-stage epoch loop.

mod config;
mod optim;
mod trainer;

pub use config::{ControllerSignal, Mode, ModelChoice, Precision, TrainConfig};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Slot};
pub use trainer::{
    read_epoch_csv, run, EpochRecord, EvalPoint, RunSummary, StepLosses, Trainer, CONTROLLER_CSV, EPOCHS_CSV,
    EVALS_JSONL, EVENTS_JSONL, INITIAL_ARCHITECTURE, TIMELINE_JSON,
};
