//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a value type holding a row-major buffer. Differentiable
//! computations are recorded on a [`Graph`]; each operation on a [`Var`]
//! appends a node carrying its backward rule. [`grad_check`] compares the
//! resulting gradients against central finite differences.
//!
//! ```
//! use memstream_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let loss = x.square().unwrap().sum_all().unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod conv;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use conv::{conv2d_input_vjp, conv_out_size, conv_transpose_out_size};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use graph::{Graph, Var};
pub use ops::{gelu, gelu_grad, sigmoid, softplus};
pub use tensor::Tensor;
