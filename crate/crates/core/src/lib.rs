pub mod auxiliary;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod nn;
pub mod pathology;
pub mod pixelcnn;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
