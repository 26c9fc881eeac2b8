//! Training: optimizer, configuration, checkpoints, metrics, the
//! distillation loop and the ablation suite.

pub mod ablation;
pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod recipe;
pub mod train;

pub use ablation::{run_ablation_suite, suite_csv, Arm, ArmResult, ArmStatus};
pub use checkpoint::Checkpoint;
pub use metrics::{cosine, pearson, RunReport, CSV_HEADER};
pub use optim::{clip_global_norm, lr_schedule, AdamW, AdamWConfig};
pub use recipe::{AlignMode, Config, DistillRecipe};
pub use train::{distill, evaluate, pretrain_teacher, DistillOutcome, Distiller, PretrainConfig};
