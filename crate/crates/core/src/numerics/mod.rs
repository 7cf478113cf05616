//! Dense `f64` tensors with reverse-mode gradients and a finite-difference
//! oracle.

mod gradcheck;
pub mod kernels;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_multi, GradCheckReport};
pub use tape::{log_softmax_values, softmax_values, Gradients, Tape, Var};
pub use tensor::Tensor;
