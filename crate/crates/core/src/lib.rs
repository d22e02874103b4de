//! Zero-shot time-series forecasting with pre-trained language models.
//!
//! The pipeline splits each normalized series into low- and high-frequency
//! parts, serializes them as text prompts, asks a generation backend to
//! continue them, validates the returned text, post-processes each part and
//! recombines the forecast for evaluation.

pub mod codec;
pub mod data;
pub mod decompose;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod report;
