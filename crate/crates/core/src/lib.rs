pub mod attributes;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod gzsl_model;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
