pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod worlds;

pub use error::{Error, Result};
