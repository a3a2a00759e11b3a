pub mod datasets;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod obe;
pub mod objectives;
pub mod trainer;

pub use error::{ObeError, Result};
