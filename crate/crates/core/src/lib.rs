//! Backward token filtering with sequence-reduced dense backpropagation.

pub mod autograd;
pub mod bench;
pub mod error;
pub mod filter;
pub mod model;
pub mod rewrite;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
