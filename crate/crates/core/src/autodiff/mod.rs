//! Dense f64 tensors with define-by-run reverse-mode differentiation.

pub mod grad_check;
mod tape;
mod tensor;

pub use grad_check::{grad_check, grad_check_params, Coords, GradCheckReport};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
