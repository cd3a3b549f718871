pub mod audio;
pub mod error;
pub mod fewshot;
pub mod invariance;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
