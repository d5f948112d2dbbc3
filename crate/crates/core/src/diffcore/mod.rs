//! Differentiable operation set with reverse-mode gradients, a parameter
//! store, and a finite-difference gradient checker.

mod graph;
mod gradcheck;
pub mod init;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{analytic_grad, grad_check, grad_check_coords, spread_coords, GraphFn};
pub use graph::{FrameLoss, Graph, Var};
pub use params::{Bound, ParamStore};
pub use tensor::{Real, Tensor};
