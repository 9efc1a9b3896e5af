//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Element, Tensor};
