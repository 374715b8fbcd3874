//! Feed-forward networks trained with a label-consistency loss on a late
//! hidden layer.
//!
//! Every neuron of a chosen hidden layer is owned by one class. A linear
//! transform of that layer's activations is pulled toward a binary "ideal
//! code" that is hot exactly on the owner neurons of the sample's class, and
//! the resulting representation error is added to the usual softmax
//! classification loss. All gradients are closed-form; there is no autodiff.
//!
//! Modules:
//! - [`tensor`]: dense row-major `f64` matrices and the kernels the gradient
//!   math needs.
//! - [`nn`]: affine+ReLU networks, stable softmax cross-entropy, explicit
//!   forward/backward.
//! - [`head`]: neuron allocation, ideal codes, the representation error and
//!   its two gradient terms.
//! - [`optim`]: SGD with momentum in three modes (`baseline`, `lcnn1`,
//!   `lcnn2`), per-epoch records.
//! - [`classify`]: argmax over output scores, k-NN over transformed
//!   representations, Gaussian-kernel class probabilities.
//! - [`analysis`]: per-class entropy and per-neuron class-distribution
//!   diagnostics.
//! - [`data`]: synthetic cluster generation, CSV ingestion, standardization,
//!   class-priority ranking.
//! - [`model`]: versioned binary serialization of a network plus its head.
//! - [`config`]: flat key=value run configuration.
//! - [`gradcheck`]: finite-difference verification of every gradient block.

pub mod analysis;
pub mod classify;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use head::{IdealCode, LabelConsistencyHead, NeuronAllocation};
pub use nn::{Activation, ForwardTrace, Layer, Network};
pub use optim::{Mode, TrainConfig, TrainRecord};
pub use tensor::DenseMatrix;

/// Crate-wide error type. `category()` yields the stable one-word tag the
/// CLI prints for machine parsing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Decode(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::LabelOutOfRange { .. } => "label",
            Error::InvalidArgument(_) => "invalid",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Decode(_) => "decode",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
