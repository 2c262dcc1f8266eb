pub mod config;
pub mod objective;
pub mod optim;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{AlignmentMode, ExperimentConfig, TrainConfig, ALIGNMENT_LEVELS, DATA_RATIOS};
pub use objective::{batch_objective, BatchLoss, Example};
pub use optim::{adamw_step, adamw_step_params, AdamWConfig, AdamWState};
pub use sweep::{ablate_random, sweep_alignment, sweep_data_ratio, Arm, RunRecord, SweepKind, SweepReport, SweepRow};
pub use train::{evaluate_split, train, RunResult, SplitEvaluation};
