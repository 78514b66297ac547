//! Dense-tensor reverse-mode autodiff engine with the layer set the
//! classifier needs: valid convolution, sigmoid/relu/softmax, max-pooling,
//! batch normalization, inverted dropout, dense layers, the fused
//! softmax/cross-entropy loss, and SGD/Adam updates.

mod kernels;

pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::Optimizer;
pub use tape::{BatchStats, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch normalization needs batch size >= 2 in train mode, got {got}")]
    BatchTooSmall { got: usize },
    #[error("pooling {h}x{w} with window {pool} would produce an empty output")]
    DegenerateOutput { h: usize, w: usize, pool: usize },
    #[error("backward already consumed this graph; run a fresh forward pass")]
    GraphConsumed,
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("probability row {row} sums to {sum}, expected 1 within 1e-6")]
    InvalidProbabilities { row: usize, sum: f64 },
}

/// Elementwise nonlinearity attached to a convolution or dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" => Some(Activation::Identity),
            "sigmoid" => Some(Activation::Sigmoid),
            "relu" => Some(Activation::Relu),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }
}
