//! Encoder-based inversion of a style-based SDF generator.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod editing;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod nn;
pub mod rendering;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
