//! Masked fully-connected network with batch normalization.
//!
//! Hidden layer `l` computes `ReLU(BN(a * (w ⊙ m) + b))`; the output layer
//! is a plain affine map feeding softmax cross-entropy. Masked weights stay
//! in storage (rewinding restores them) but never take part in a pass and
//! always receive a zero gradient.

mod forward;
mod params;

use thiserror::Error;

pub use forward::{
    accuracy, forward, loss_and_grads, predict, softmax_rows, Backprop, ForwardCache, LayerCache,
    Mode,
};
pub use params::{
    ablate_nodes, init_params, BatchNorm, Grads, Layer, LayerDims, LayerGrads, MaskSet, ParamSet,
    Real, BN_EPS, BN_MOMENTUM,
};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid layer dims {0:?}: need at least 3 positive sizes")]
    InvalidDims(Vec<usize>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("train-mode batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[cfg(test)]
mod tests;
