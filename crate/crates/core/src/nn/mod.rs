//! Minimal dense tensors, reverse-mode autodiff and optimisation.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub(crate) mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Graph, Var};
pub use params::{AdamW, AdamWConfig, Grads, ParamId, ParamStore};
pub use tensor::Tensor;
