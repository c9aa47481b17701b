pub mod calibration;
pub mod cheapconv;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
