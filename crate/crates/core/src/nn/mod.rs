//! Minimal differentiable core: row-major 2-D tensors, a reverse-mode tape
//! with the fused ops the voice-conversion network needs, layer builders,
//! Adam and a named-tensor parameter container.
//!
//! Sequence batches are stacked along rows: a batch of `B` sequences of `T`
//! frames is a `(B * T) x C` matrix with row `b * T + t`. Ops that care about
//! sequence boundaries (convolution, LSTM, time resampling) take a
//! [`Layout`].

mod gemm;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{
    BatchNorm, BiLstm, Conv1d, Layer, LayerKind, LayerSpec, Linear, Lstm, Pass, RunningUpdate,
    CONV_KERNEL,
};
pub use optim::{clip_grad_norm, AdamConfig, AdamState};
pub use params::{
    read_named_tensors, write_named_tensors, NamedTensor, ParamId, ParamStore, PARAMS_MAGIC,
    PARAMS_VERSION,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; run forward again")]
    AlreadyBackward,
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter container: {0}")]
    Format(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("invalid layer spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Sequence geometry of a stacked batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(batch: usize, len: usize) -> Self {
        Self { batch, len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}
