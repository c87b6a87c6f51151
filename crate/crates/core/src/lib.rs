//! Discrete-time competing-risk survival modeling over irregular
//! longitudinal records: data preparation, a small autodiff engine, the
//! attention-based hazard model, training, and evaluation metrics.

pub mod datamodel;
pub mod diffcore;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod hazardheads;
pub mod metrics;
pub mod model;
pub mod training;
pub mod synthgen;

pub use error::{CoreError, Result};
