//! Shaped `f64` arrays with tape-based reverse-mode differentiation.
//!
//! Operations work on rank-2 matrices (a vector is a `[1, n]` row); the only
//! broadcast is a bias added to every row. Each primitive on [`Tape`] records
//! its inputs, and [`Tape::backward`] walks the record once in reverse.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, log_softmax_rows, matmul, sigmoid, softmax_rows, transpose, Tensor};
