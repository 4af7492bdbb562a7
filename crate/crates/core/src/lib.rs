//! Temporal graph storage, decay-rate fitting, attention-based neighbor
//! sampling and the fusion link predictor.

pub mod checkpoint;
mod error;
pub mod gas;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod par;
pub mod sampling;
pub mod tds;
pub mod trainer;

pub use error::{DpsError, Result};
