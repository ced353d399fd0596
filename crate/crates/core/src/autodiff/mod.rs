//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FdReport, Parameters};
pub use tape::{Gradients, Op, Tape, Var};
pub(crate) use tensor::matmul;
pub use tensor::{log_softmax_row, Tensor};
