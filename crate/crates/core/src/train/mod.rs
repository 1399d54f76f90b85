//! Training: cosine-annealed Adam with a slower encoder group, pixel-wise
//! cross-entropy, per-epoch evaluation and resumable checkpoints.

mod config;
mod fit;
mod loss;
mod optim;

pub use config::{cosine_lr, TrainConfig};
pub use fit::{
    config_hash, epoch_plan, fit, fit_with, group_hyper, train_step, EpochLog, FitSummary,
    SampleSource, StepOutcome, TrainData, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
pub use loss::{cross_entropy, LossOutput};
pub use optim::{Adam, GroupHyper};
