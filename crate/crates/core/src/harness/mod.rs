//! Toy transformer, synthetic tasks, training, checkpoints and diagnostics.

pub mod analysis;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod params;
pub mod task;
pub mod train;

pub use analysis::{analyze_embeddings, distance_matrix, leave_one_out_selection, EmbeddingDump};
pub use audit::{gradient_audit, AuditOptions, AuditReport, GroupCheck};
pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint};
pub use config::{LayerKind, ModelConfig, OptimizerConfig, TaskConfig};
pub use model::{param_count_report, ForwardPass, Model, ParamReport};
pub use optim::{learning_rate, Adam};
pub use params::{ParamId, ParamStore};
pub use task::{Batch, Split, SyntheticTask, Targets};
pub use train::{evaluate, run_training, EvalMetrics, StepMetrics, TrainOutcome, Trainer, METRICS_HEADER};
