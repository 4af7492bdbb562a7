//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors of rank at most 3, plus Adam and Glorot initialization.
//!
//! Parameters live in a [`ParamStore`] and are read onto a fresh [`Tape`]
//! for every forward pass. [`Tape::backward`] consumes the tape and returns
//! [`Gradients`] keyed by [`ParamId`].
//!
//! ```
//! use dps_autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::from_vec(vec![1.0, -2.0]));
//! let mut tape = Tape::new();
//! let x = tape.param(&store, w);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param(w).unwrap().data(), &[2.0, -4.0]);
//! ```

mod adam;
pub mod check;
mod error;
mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use init::{fans, glorot_uniform};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
