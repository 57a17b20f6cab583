//! Losses, optimizers, batching, evaluation and the training loop.

pub mod batch;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use batch::{make_batch, shuffled_batches};
pub use eval::{evaluate, evaluate_with, Evaluation, EVAL_BATCH};
pub use loss::{argmax_rows, cross_entropy, softmax};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig};
pub use trainer::{train, Checkpoint, EpochMetrics, RunMetrics, TrainConfig, TrainOutcome, TrainerState};
