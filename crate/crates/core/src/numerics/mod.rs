//! Reverse-mode differentiation over dense `f64` matrices, the Adam optimizer,
//! a central-difference oracle and checkpoint I/O.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use graph::{Graph, Var};
pub use kernels::{gelu, gelu_grad};
pub use tensor::{GradMap, ParamStore, Parameter, Tensor};

