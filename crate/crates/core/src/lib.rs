pub mod encoder;
pub mod error;
pub mod eval;
pub mod metric;
pub mod shapes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
