//! Numeric core: row-major `f64` tensors, a define-by-run tape with
//! reverse-mode gradients, a named parameter registry, Adam, and the
//! learning-rate / KL-weight schedules used for training.

pub mod adam;
pub mod error;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NumericsError, Result};
pub use params::ParamStore;
pub use schedule::Schedule;
pub use tape::{Gradients, Graph, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
