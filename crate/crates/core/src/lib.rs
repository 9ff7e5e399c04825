//! Disaster-aware spatio-temporal attention for commercial land use change.

pub mod data;
pub mod error;

pub use error::{Error, ErrorKind, Result};
pub mod graphs;
pub mod model;
pub mod resilience;
pub mod synth;
pub mod training;
