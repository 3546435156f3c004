//! Dense `f64` tensors, graph-based reverse-mode differentiation, the only
//! random number source, and a finite-difference gradient oracle.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckEntry, GradCheckReport, ABS_FLOOR};
pub use ops::{gelu, sigmoid, softmax_in_place};
pub use rng::{Rng, RngState, RNG_ALGORITHM};
pub use tensor::{count_flops, flop_count, grad_enabled, no_grad, reset_flop_count, Tensor};
