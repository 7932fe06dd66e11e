//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradient, check_gradients, DEFAULT_STEP};
pub use graph::{Graph, NodeId, Var, LOG_GUARD, NORM_GUARD};
pub use tensor::Tensor;
