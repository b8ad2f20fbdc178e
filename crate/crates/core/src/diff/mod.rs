//! Dense tensors, a recording graph with reverse-mode gradients, the
//! finite-difference oracle and the Adam optimizer.

mod adam;
mod check;
mod graph;
mod param;
mod tensor;

pub use adam::Adam;
pub use check::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Var, ACOS_CLAMP};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
