//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Ops record themselves on a [`Tape`] whenever an operand is attached to
//! one. [`Tensor::backward`] walks the tape in reverse recording order,
//! accumulating vector-Jacobian products, and consumes it.
//!
//! ```
//! use trackerf_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::<f64>::from_slice(&[2], &[1.0, 2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum_all().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod kernels;
mod ops;
mod real;
mod tape;
mod tensor;
pub mod ten;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use error::{Result, TensorError};
pub use kernels::Exec;
pub use ops::Conv2dSpec;
pub use real::{DType, Real};
pub use tape::{finite_checks_enabled, set_finite_checks, BackwardFn, Gradients, Tape};
pub use tensor::Tensor;
