pub mod adam;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod semisup;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
