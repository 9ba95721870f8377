//! The student-teacher residual MLP and everything needed to train it.

pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{
    lr_at, EpsilonMode, InitScheme, ModelConfig, OptimizerKind, QuantConfig, QuantPreset, QuantSetting, Schedule,
    TrainConfig,
};
pub use data::{generate_batch, Stream};
pub use model::{build_student, build_teacher, ForwardTelemetry, LayerParams, Model, Params};
pub use optim::OptimizerState;
pub use sweep::{run_sweep, RunSummary, SweepGrid, SweepOutcome, SweepPoint};
pub use train::{
    dual_run, evaluate, train_run, train_run_with, AnyTrainer, DivergenceReason, DualRun, PairedLog, PairedRecord,
    RunLog, RunStatus, StepRecord, Trainer,
};
