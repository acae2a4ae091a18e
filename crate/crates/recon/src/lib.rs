pub mod error;
pub mod mri;
pub mod phantom;
pub mod tensor;

pub use error::{Error, Result};
