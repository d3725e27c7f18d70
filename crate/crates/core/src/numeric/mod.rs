//! Minimal tensor engine with reverse-mode differentiation.
//!
//! The engine provides exactly the operation set the encoder and losses need:
//! dense row-major tensors, a handful of linear-algebra and sampling ops, a
//! tape-free backward pass over the operation graph embedded in the tensors,
//! and a finite-difference gradient checker. Tensors are immutable values;
//! every op is a pure function and safe to call from multiple threads.

mod autodiff;
mod gradcheck;
mod ops;
mod sample;
mod snapshot;
mod tensor;

pub use autodiff::{backward, grads_by_name, Gradients, ParamSet};
pub use gradcheck::{grad_check, CoordCheck, GradCheckReport, GradCheckSettings};
pub use sample::{bilinear_sample, bilinear_sample_at};
pub use snapshot::{load_tensor, read_tensor, read_tensor_embedded, save_tensor, write_tensor};
pub use tensor::{NumericError, Tensor};
