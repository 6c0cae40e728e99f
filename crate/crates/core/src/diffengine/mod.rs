//! Dense arrays, a reverse-mode tape, small MLPs and the Adam optimizer.

mod adam;
mod array;
mod checkpoint;
mod mlp;
mod tape;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState, GradientDiagnostics};
pub use array::DenseArray;
pub use checkpoint::{read_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use mlp::{Activation, Layer, LayerVars, Mlp, MlpForward, MlpVars, RecordedMlp};
pub use tape::{standardize, ComputationTape, Gradients, Var};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("concat of zero arrays")]
    EmptyConcat,
    #[error("tape has no output node; call set_output first")]
    Unfinalized,
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("non-finite parameters in layer {layer}")]
    NonFiniteParameters { layer: usize },
    #[error("non-finite gradient: {0:?}")]
    NonFiniteGradient(GradientDiagnostics),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
