//! Optimiser, staged training loop, held-out evaluation and ablations.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use ablate::{ablate, ablation_cells, ablation_csv, AblationAxis, AblationRow, AblationSummary, ABLATION_HEADER};
pub use config::{EvalConfig, TrainConfig};
pub use eval::{entry_sample_seed, evaluate_model, evaluate_outputs, summarize, EntryResult, EvalSettings, MetricReport, TaskMetrics};
pub use optim::{adamw_update, clip_scale, global_grad_norm, optimizer_step, AdamConfig, AdamState, StepStats};
pub use trainer::{prompt_pack, train, write_loss_csv, LossRecord, RunOptions, RunOutput, TrainSample, TrainState, Trainer};
