//! Dense tensors and tape-based reverse-mode differentiation.

mod array;
mod element;
pub mod ops;
pub mod tape;

pub use array::Tensor;
pub use element::{DType, Element};
pub use ops::{BinaryKind, ReduceKind};
pub use tape::{BackwardContext, BackwardRule, Gradients, Tape, Var};
