//! Training, inference, evaluation, and experiment orchestration.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod train;

pub use ablate::{run_ablation, AblationAxis, AblationRun};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{LrSchedule, TrainConfig};
pub use infer::{infer, infer_batch, infer_corpus, Inference};
pub use metrics::{eval_metrics, EvalReport, QueryRecord, MAP_THRESHOLDS};
pub use train::{train, train_with, EpochStats, TrainOutput};
