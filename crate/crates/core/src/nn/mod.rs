//! Small reverse-mode autodiff core with the layers the destination models
//! need: embeddings, stacked LSTMs, dense layers, softmax and a haversine
//! distance node.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{
    gradient_check, gradient_check_with_step, relative_error, GradCheckReport, FD_STEP,
    REL_ERROR_FLOOR,
};
pub use graph::{haversine_grad, Graph, NodeGrads, Var};
pub use layers::{Activation, Dense, Embedding, LstmLayer, LstmStack};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {table} (vocabulary {vocab})")]
    IndexOutOfRange {
        table: String,
        index: usize,
        vocab: usize,
    },
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
