//! Few-shot anomaly detection and segmentation over precomputed backbone
//! features: residual scoring against normal prompts, text-aligned semantic
//! maps, adapter training and evaluation metrics.

pub mod cli;
pub mod dasl;
pub mod error;
pub mod features;
pub mod inference;
pub mod metrics;
pub mod oasl;
pub mod par;
pub mod residual;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
