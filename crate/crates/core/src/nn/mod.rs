//! Small reverse-mode autodiff engine with the layer set the autoencoders and
//! the state generator need, plus Adam.

mod adam;
pub mod conv;
mod graph;
mod layer;
mod real;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use conv::ConvGeom;
pub use graph::{BatchStats, Graph, Var};
pub use layer::{LayerConfig, LayerKind};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer configuration: {0}")]
    InvalidConfig(String),
    #[error("batch norm in training mode needs more than one value per channel")]
    BatchTooSmall,
    #[error("loss does not depend on any trainable parameter")]
    DisconnectedGraph,
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
