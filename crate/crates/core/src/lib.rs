pub mod config;
pub mod datasets;
pub mod detection;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nets;
pub mod training;

pub use error::{Result, VprError};
