//! Low-rank adapters on attention projections.

mod adapter;
mod train;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::numkit::TensorError;
use crate::probe::ProbeError;
use crate::weight_io::CheckpointError;

pub use adapter::{
    adapted_forward, lora_parameter_count, merge, LoraAdapter, LoraSet, Projection, LORA_INIT_STD,
};
pub use train::{
    init_adapters, predict_adapted, train_adapters, AdapterBundle, LoraConfig, LoraTask, TrainedAdapters,
    GRAD_CHECK_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} outside 1..={max}")]
    Rank { rank: usize, max: usize },
    #[error("lora config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("gradient check failed for layer {layer} {projection} factor {factor}: relative error {error:e}")]
    GradCheck {
        layer: usize,
        projection: &'static str,
        factor: &'static str,
        error: f64,
    },
    #[error("base encoder weights changed during training ({before} -> {after})")]
    BaseMutated { before: String, after: String },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Container(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}
