pub mod analytic;
pub mod dropout;
pub mod error;
pub mod harness;
pub mod loss;
pub mod mask;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
