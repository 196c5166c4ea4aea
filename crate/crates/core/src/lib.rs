pub mod anchors;
pub mod autograd;
pub mod data;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod evaluation;
pub mod generator;
pub mod inference;
mod kernels;
pub mod matching;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
