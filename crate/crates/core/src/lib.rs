pub mod complexity;
pub mod error;
pub mod fit;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{FitError, Result};
pub use tensor::{Graph, Gradients, Tensor};
