//! Block-wise subset search and the progressive mask-then-prune controller.

mod calibration;
mod controller;
mod search;

pub use calibration::{sample_ids, CalibrationCache, PrmPair};
pub use controller::{
    convergence_check, convergence_check_with, improvement_check, ControllerState, Event, EventKind, Improvement,
    Phase, DEFAULT_THRESHOLD, DEFAULT_WINDOW,
};
pub use search::{blockwise_prune_search, evaluate_subsets, DiscrepancyRecord, SearchOutcome};
