//! Differentiable random-fern ensembles as a multiplication-free drop-in
//! replacement for convolution layers, together with the small training
//! stack needed to train, verify and cost them.

pub mod costmodel;
pub mod error;
pub mod fern;
pub mod io;
pub mod layers;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
