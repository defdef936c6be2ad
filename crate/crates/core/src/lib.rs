pub mod cli;
pub mod codec;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
