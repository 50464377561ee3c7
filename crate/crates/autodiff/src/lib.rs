//! Minimal dense tensor arithmetic with reverse-mode automatic
//! differentiation, sized for small LSTMs, soft attention and neural module
//! networks.
//!
//! Graphs are dynamic: build a fresh [`Tape`] for every forward pass, call
//! [`Tape::backward`] on a scalar, fold the result into a [`ParamStore`] and
//! step an [`Adam`] optimizer.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
