//! Class-aware training: soft-margin losses on the class-token (and, for
//! V2, PatchCAM) scores, AdamW with cosine decay, and the mini-batch loop.

mod loss;
mod optim;
mod run_config;
mod trainer;

pub use loss::{loss_graph, multilabel_soft_margin_loss, total_loss, LabelVector, LossParts};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use run_config::ConfigOverrides;
pub use trainer::{
    batch_gradients, derive_seed, loss_trace_csv, sample_gradients, train, train_from, RunParams, StepLoss,
    TrainOutcome, LOSS_CSV_HEADER,
};
