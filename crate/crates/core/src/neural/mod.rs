//! Stacked LSTM language model over the symbol vocabulary, trained with
//! truncated BPTT, Adam and global-norm gradient clipping.

mod checkpoint;
mod lstm;
mod optim;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use lstm::{evaluate_batch, forward, loss_and_grads, softmax, step, Dropout, ForwardOutput, LossAndGrads};
pub use optim::{adam_step, clip_global_norm, clip_gradients, AdamConfig, AdamState};
pub use params::{Gradients, LaneState, LstmLayerParams, NetworkParams, OutputHead, RnnState, GATES};
pub use train::{evaluate, train, EarlyStopping, EpochRecord, StopDecision, TrainConfig, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid training config: {0}")]
    Config(String),
}
