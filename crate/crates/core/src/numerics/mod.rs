//! Dense tensors, a reverse-mode graph, and the recurrent-cell primitives
//! the separator is built from.

mod conv;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod lstm;
mod ops;
mod real;
mod tensor;

pub use conv::conv_output_len;
pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use graph::{BackwardOp, Gradients, Graph, Var};
pub use lstm::{LstmCellParams, LstmVars};
pub use ops::Elementwise;
pub use real::{DType, Real};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use gemm::{gemm, Layout};
