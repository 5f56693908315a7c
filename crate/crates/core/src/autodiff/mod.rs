//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Values are computed eagerly as operations are recorded on a [`Tape`]; a
//! single reverse sweep then produces gradients for every leaf. The op set is
//! deliberately small and domain-shaped: dense matmul and 2D convolution for
//! the image encoder, sparse 3D convolution and masked moments for volume
//! fusion, weighted gathers and ray compositing for rendering. All ops are
//! generic over the scalar type via [`Real`] so the same graph runs in f32 or
//! f64.

mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{assert_grads_close, fd_gradient, grads_close};
pub use ops::{CompositePlan, GatherPlan, MaskSet, NeighborTable, RaySpan};
pub use scalar::{sigmoid, softplus, Dtype, Real};
pub use tape::{Gradients, NodeId, Tape, TapeError};
pub use tensor::Tensor;
