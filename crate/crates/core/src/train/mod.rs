//! Loss, metrics, optimization, checkpoints and evaluation.

pub mod checkpoint;
pub mod evaluate;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use checkpoint::{check_compatible, load_checkpoint, save_checkpoint, Checkpoint};
pub use evaluate::{evaluate, predict, EvalReport, SceneRow};
pub use loss::{loss_weights, masked_l1, sequence_loss};
pub use metrics::{aggregate, metrics, MetricsRecord};
pub use optim::{clip_global_norm, AdamW, OneCycle};
pub use trainer::{train, TrainOptions, TrainReport};
