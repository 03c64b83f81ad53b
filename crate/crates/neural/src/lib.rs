//! Encoder-decoder collapse predictor trained from scratch on CPU.
//!
//! The network sees a depth image and two binary masks (object to extract,
//! object to support) and emits per-pixel logits over {E, S, C, B}.

pub mod adam;
pub mod checkpoint;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod predictor;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, EpochLog, TrainLog};
pub use model::{Model, ModelSpec};
pub use predictor::LearnedPredictor;
pub use tensor::Tensor;
pub use train::{train, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
}
