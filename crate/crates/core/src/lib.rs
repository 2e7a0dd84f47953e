//! Multi-modal temporal convolutional network for short-term action
//! anticipation from precomputed per-snippet features.

pub mod bench;
pub mod branch;
pub mod check;
pub mod data;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Rng, Tensor};
