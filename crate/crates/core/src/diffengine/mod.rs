//! Reverse-mode differentiation on a recorded tape.
//!
//! The primitive set is exactly what the proposal network and the training
//! losses need: elementwise arithmetic with trailing broadcast, a few
//! nonlinearities, reductions, matmul, zero-padded strided convolution,
//! multilinear grid sampling, row gather/concat, and a fused
//! Nadaraya-Watson interpolation onto grid nodes.
//!
//! ```
//! use trilandmark::diffengine::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
//! let y = tape.squared_norm(x);
//! assert_eq!(tape.item(y).unwrap(), 25.0);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0, 8.0]);
//! ```

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{check_gradients, relative_error, GradientReport, DEFAULT_FD_EPS};
pub use kernels::ConvGeom;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
