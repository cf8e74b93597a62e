//! Dense matrices, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{binary_entropy, Graph, Reduction, Var};
pub use params::{Binding, ParamStore};
pub use scalar::Scalar;
pub use tensor::{dense_forward, sigmoid, sigmoid_scalar, softmax_vec, Tensor2D};
