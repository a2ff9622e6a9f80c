//! Dense tensors and a tape for reverse-mode automatic differentiation.
//!
//! Values are stored row-major in a generic [`Scalar`] (f32 for models, f64
//! for gradient checking). Every reduction accumulates in f64 with a fixed
//! sequential order, so forward passes are bit-reproducible.
//!
//! ```
//! use dualpaint_autograd::{Tape, Tensor};
//!
//! let tape = Tape::<f32>::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().with_grad());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), vec![2.0, -4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use ops::reference_attention;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
