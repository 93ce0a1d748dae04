//! Optimization, augmentation, the pre-training and fine-tuning loops, and
//! classification metrics.

pub mod augment;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pretrain;

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentConfig};
pub use finetune::{finetune, FinetuneConfig, FinetuneMode, FinetuneOutcome, Prediction};
pub use metrics::{evaluate, ClassReport};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{
    log_to_jsonl, pretrain, reconstruction_gradients, reconstruction_loss, LossRecord, PretrainConfig,
    PretrainOutcome,
};
