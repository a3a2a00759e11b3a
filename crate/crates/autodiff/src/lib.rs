//! Small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Graphs are built eagerly by calling operations on [`Var`]. Backward rules
//! are expressed with the same operations, so [`grad`] with
//! `create_graph = true` yields gradients that are differentiable again.
//! Gradient penalties on a critic rely on this.

mod conv;
mod grad;
mod ops;
mod optim;
mod var;

pub use conv::{conv2d, conv_transpose2d, linear, Window};
pub use grad::{grad, gradients};
pub use ops::broadcast_shape;
pub use optim::{sgd_step, Adam, AdamState};
pub use var::{grad_enabled, no_grad, GradModeGuard, Tensor, Var};
