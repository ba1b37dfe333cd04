//! The two-module classifier: configuration, forward pass, training,
//! metrics, cost accounting, checkpoints and saliency.

mod checkpoint;
mod config;
mod costs;
mod metrics;
mod model;
mod saliency;
mod train;

pub use checkpoint::{Checkpoint, EncodedTensor};
pub use config::{ModelConfig, ModuleConfig, Preset};
pub use costs::{count_costs, Costs};
pub use metrics::Metrics;
pub use model::{argmax, softmax, Architecture, Batch, Forward, Model};
pub use saliency::{concentration, saliency, Saliency};
pub use train::{cosine_lr, evaluate, predict_dataset, EpochLog, Sgd, TrainConfig, Trainer};

#[cfg(test)]
mod tests;
