//! Dense tensors, a gradient tape, and a finite-difference oracle.

mod check;
pub mod kernels;
mod tape;
mod tensor;

pub use check::{central_difference, finite_diff_check, relative_error, sample_coordinates};
pub use tape::{CrossEntropy, Gradients, Mask, Tape, Var};
pub use tensor::{Scalar, Tensor};
