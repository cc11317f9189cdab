//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`). Property tests and
//! finite-difference checks run at 64-bit; training loops may use 32-bit.
//!
//! ```
//! use numcore::{Tape64, Tensor64};
//!
//! let mut tape = Tape64::new();
//! let x = tape.param(Tensor64::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum_all(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod ops;
mod real;
pub mod shape;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::grad_check;
pub use ops::Unary;
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
