pub mod adapters;
pub mod annotator;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod granularity;
pub mod harness;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
