//! Dense tensors, reverse-mode autodiff, seeded randomness and
//! finite-difference gradient checking.

mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, WorstCoordinate};
pub use rng::{init_params, InitScheme, Rng};
pub use scalar::{gemm, MatMut, MatRef, Precision, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
