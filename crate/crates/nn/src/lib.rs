//! Minimal differentiable-computation substrate: row-major matrices, a
//! define-by-run reverse-mode tape, attention / layer-norm / feed-forward
//! layers, Adam, and finite-difference gradient checking.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{
    compare_gradients, grad_check, relative_error, CoordCheck, GradCheckConfig, GradCheckReport,
    RELATIVE_FLOOR,
};
pub use graph::{AttentionMask, Backward, Graph, Var};
pub use layers::{sinusoidal_position, FeedForward, LayerNorm, Linear, MultiHeadAttention, LAYER_NORM_EPS};
pub use optim::{adam_step, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("attention row {0} has every key masked")]
    FullyMaskedRow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}
