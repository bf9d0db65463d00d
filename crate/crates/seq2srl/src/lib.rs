//! Sequence-to-sequence semantic role labeling with attention and copying.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod conll;
pub mod decode;
pub mod error;
pub mod linearize;
pub mod model;
pub mod score;
pub mod svg;
pub mod train;
pub mod vocab;
pub mod gradcheck;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
