//! Configuration, training schedule, evaluation, checkpoints and dumps.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod introspect;
pub mod optim;
pub mod train;

pub use checkpoint::{dataset_from_archive, dataset_to_archive, Checkpoint};
pub use config::{OptimizerConfig, OptimizerKind, PhaseConfig, Phases, RunConfig, TrainMode};
pub use eval::{evaluate, evaluate_on, EvalReport, MetricRow};
pub use introspect::{dump_attention, export_prior, predictions_archive};
pub use train::{build_body, init_params, train, train_phase, StepRecord, TrainOutcome};
