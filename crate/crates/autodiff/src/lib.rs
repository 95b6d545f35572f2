//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Ops are recorded on a per-thread tape as they run. [`grad`] walks the
//! tape backwards; with `create_graph` the gradient computation is itself
//! recorded, which is what a gradient penalty on a critic needs.

mod graph;
mod ops;
mod optim;
pub mod tensor;

pub use graph::{grad, is_grad_enabled, no_grad, Var};
pub use ops::SeparableMap;
pub use optim::Adam;
pub use tensor::Tensor;
