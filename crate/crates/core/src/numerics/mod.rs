//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything is row-major `Vec<S>` storage behind an `Arc`, so cloning a
//! tensor (e.g. registering model parameters on a tape) never copies the
//! payload. Two precisions are supported: `f32` for training and
//! benchmarks, `f64` for finite-difference gradient checks.

mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_FD_STEP};
pub use linalg::{matmul_nn, matmul_nt, matmul_tn, thread_count};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::{BoolMat, Scalar, Tensor};
