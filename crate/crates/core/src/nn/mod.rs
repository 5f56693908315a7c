//! Network plumbing: named parameter storage with seeded initialization, a
//! [`Graph`] that binds parameters onto a tape, reusable layer stacks, and the
//! Adam optimizer.

mod adam;
mod graph;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, NamedGradients};
pub use layers::{Activation, ConvStackSpec, MlpSpec, SparseStackSpec};
pub use params::ParameterStore;

use thiserror::Error;

use crate::autodiff::TapeError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("parameter {0:?} contains non-finite values")]
    NonFiniteParam(String),
    #[error("gradient for {0:?} contains non-finite values")]
    NonFiniteGrad(String),
    #[error("optimizer state for {name:?} has shape {got:?}, parameter has {want:?}")]
    MomentShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("gradient for {name:?} has shape {got:?}, parameter has {want:?}")]
    GradShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("new value for {name:?} has shape {got:?}, parameter has {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
}
