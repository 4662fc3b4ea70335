//! Minimal dense-tensor substrate with reverse-mode automatic differentiation.
//!
//! Tensors are immutable, row-major and stored as `f64`. In the default
//! [`Precision::F32`] mode every op output (and every gradient) is rounded to
//! single precision, so values behave like 32-bit floats while accumulations
//! inside an op run wide. Switching a thread to [`Precision::F64`] disables
//! the rounding, which is what the gradient checker uses for tight tolerances.
//!
//! Ops are recorded on a thread-local [`tape`] whenever at least one input
//! requires a gradient; [`backward`] replays the tape in reverse.

mod error;
pub mod fft;
pub mod gradcheck;
mod gemm;
pub mod ops;
mod precision;
pub mod tape;
mod tensor;

pub use error::{Error, Result};
pub use fft::{fft2, ifft2, ComplexGrid};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::{Padding, TopK};
pub use precision::{is_grad_enabled, no_grad, precision, set_precision, with_precision, Precision};
pub use tape::{backward, Gradients};
pub use tensor::{NodeId, Tensor};
