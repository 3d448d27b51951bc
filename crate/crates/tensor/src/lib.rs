//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Everything runs in 64-bit floats on a single-writer tape: linear layers,
//! row softmax, layer normalization and multi-head attention, which is enough
//! to express the full RoI refinement network and verify every gradient with
//! central finite differences.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use params::{xavier_uniform, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
