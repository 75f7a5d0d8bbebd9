//! Grouped variational autoencoders.
//!
//! Two ways of inferring a group's shared content from its members are
//! implemented side by side: plain averaging of the member posteriors
//! (GVAE) and their normalized product (MLVAE). Both are trained with the
//! same objective on grouped data and evaluated with few-shot
//! classification, content/transformation swapping and latent analyses.
//!
//! * [`tensor`] - float64 tensors and a reverse-mode autodiff graph.
//! * [`gaussian`] - diagonal Gaussians, KL, reparametrization, aggregation.
//! * [`model`] - the five networks, the grouped forward pass and the ELBO.
//! * [`trainer`] - group sampling, Adam, training, checkpoints.
//! * [`synthdata`] - synthetic grouped images and the dataset file format.
//! * [`eval`] - few-shot classification, latent analyses, image grids.

pub mod eval;
pub mod gaussian;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use gaussian::DiagGaussian;
pub use model::{AggregationMode, Model, ModelConfig, ModelParams};
pub use synthdata::{FactorSpec, GroupedDataset};
pub use tensor::{Graph, NodeId, Tensor, TensorError};
pub use trainer::{Checkpoint, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite value in {tensor} at step {step}")]
    NonFinite { tensor: String, step: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("content dimension {0} has zero spread across the images")]
    DegenerateDimension(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
