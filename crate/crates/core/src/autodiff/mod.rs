//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! ```
//! use weakcount::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use ops::{conv_out_dim, forward, OpKind, COSINE_EPS, DIV_GUARD};
pub use tape::{AdjointFault, Gradients, Tape, Var};
pub use tensor::Tensor;
