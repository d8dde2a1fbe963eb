//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every primitive executed through it; replaying the
//! records in reverse accumulates exact gradients into each reachable
//! [`GradTensor`]. All trainable state in the renderer (grid factors, basis
//! projection, network weights, illumination codes) lives in `GradTensor`s.

mod check;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use tape::{Activation, Reduce, Tape};
pub use tensor::GradTensor;
