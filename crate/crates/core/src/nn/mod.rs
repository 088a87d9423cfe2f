//! Dense tensors and a tape-based reverse-mode autodiff.
//!
//! The engine runs inference in f32 and verifies gradients in f64; every
//! kernel is generic over [`tensor::Scalar`] so both widths share one
//! implementation. The [`tape::Tape`] records each executed op with the
//! activations its backward pass needs; replaying the tape in reverse yields
//! gradients for every registered parameter.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{GruIds, MhaIds, Tape, ValueId};
pub use tensor::{Scalar, Tensor};
