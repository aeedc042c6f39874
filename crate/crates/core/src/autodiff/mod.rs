//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; every operation on a [`Var`] appends a node and
//! returns a handle to it. Shapes are never broadcast implicitly: aside from
//! the `*_scalar` operations, operands must agree exactly, and explicit ops
//! such as [`Var::tile_rows`] do any alignment.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, TapeDiagnostics, TapeRecord, Var, KL_FLOOR};
pub use tensor::Tensor;
