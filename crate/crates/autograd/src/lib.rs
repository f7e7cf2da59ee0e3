//! Dense tensors with tape-based reverse-mode differentiation, sized for
//! small 3D convolutional encoder–decoders on a CPU.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operators are
//! methods on the tape that return [`Var`] handles; [`Tape::backward`] sweeps
//! the recorded nodes in reverse and returns [`Gradients`] keyed by
//! [`ParamId`].
//!
//! ```
//! use autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.leaf(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod conv;
mod element;
mod error;
mod ops;
mod tape;
mod tensor;

pub use element::{Dtype, Element};
pub use error::{Result, TensorError};
pub use ops::{DEFAULT_COSINE_EPS, DEFAULT_LEAKY_SLOPE, DEFAULT_NORM_EPS};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;

#[cfg(any(test, feature = "testing"))]
pub mod testing;
