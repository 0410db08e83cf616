//! Ambiguity-aware segmentation training on heterogeneously labeled corpora.

pub mod audit;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod label;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod loss;
pub mod net;
pub mod optim;
pub mod volume;

pub use error::{Error, Result};
