//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values are copied onto the
//! tape, so parameters can be updated in place between passes without
//! invalidating anything recorded. [`Tape::backward`] returns the gradients
//! of tracked leaves; callers fold them into their parameter tensors with
//! [`Gradients::accumulate_into`].
//!
//! ```
//! use lsi_core::autodiff::{Tape, Tensor};
//!
//! let x = Tensor::<f64>::from_vec(vec![1.0, 2.0]).with_grad();
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let sq = tape.mul(v, v).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_entries, rel_err, REL_ERR_FLOOR};
pub use kernels::ConvGeom;
pub use tape::{Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
