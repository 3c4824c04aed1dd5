pub mod cli;
pub mod composer;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod hash;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
