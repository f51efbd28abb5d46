//! Reverse-mode differentiation over dense matrices.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Var};
pub use tensor::{Param, ParamId, ParamStore, Scalar, Tensor};
