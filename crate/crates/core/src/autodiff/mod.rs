//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use tensor::{matmul, Tensor};
