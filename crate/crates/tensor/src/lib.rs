//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values are `f32` in row-major order; reductions and matrix products
//! accumulate in `f64`. The op set is deliberately small: elementwise
//! add/sub/mul (with scalar broadcast), scalar multiplication, matmul,
//! relu/silu/tanh, layer norm, sum/mean, square, column concat and slice.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use nn::{Activation, BoundMlp, Linear, Mlp};
pub use optim::Adam;
pub use tape::{ElementwiseKind, Tape, Var};
pub use tensor::Tensor;
