//! Dense tensors, a dynamic reverse-mode graph over a fixed set of
//! primitives, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, ParamCheck};
pub use graph::{GeluForm, Gradients, Graph, Var};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;
