//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is rank-4 `(n, c, h, w)` in 64-bit floats. Matrices and
//! sequences are expressed as flattened views of that layout.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::Unary;
pub use params::{Ctx, ParamId, ParamStore};
pub use rng::{mix_seed, Rng};
pub use tensor::{Shape, Tensor};
