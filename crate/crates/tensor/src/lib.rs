//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`]; every forward method records one node and
//! returns a [`Var`] handle. [`Tape::backward`] walks the record in reverse
//! and returns [`Gradients`] for every node that requires one.
//!
//! ```
//! use magtrack_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.square(x);
//! let loss = tape.sum_all(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many};
pub use kernels::DropoutKey;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
