//! Anomalous sound detection on log-Mel and learned temporal features, with
//! multi-head self-attention over frequency bins.

pub mod afpa;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tgram;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
