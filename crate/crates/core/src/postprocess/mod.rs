//! Post-processing of generated components before recombination.
//!
//! The low component can be refined by a small MLP trained on earlier
//! (prediction, truth) pairs. The high component is re-standardized to the
//! history's mean and standard deviation.

pub mod refine;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Series;
pub use refine::{refine_low, train_refiner, EpochLoss, RefinerConfig, RefinerModel, TrainingLog};

/// Predicted standard deviations at or below this are degenerate.
pub const SIGMA_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("need at least 2 training pairs, got {pairs}")]
    InsufficientData { pairs: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("refiner has not been trained")]
    UntrainedModel,
    #[error("expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("predicted series has standard deviation {sigma}; nothing to rescale")]
    DegeneratePrediction { sigma: f64 },
    #[error("refiner produced non-finite output")]
    NonFiniteOutput,
    #[error("invalid refiner config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(String),
}

/// Population mean and standard deviation.
pub fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mu_h: f64,
    pub sigma_h: f64,
    pub mu_p: f64,
    pub sigma_p: f64,
}

impl MomentPair {
    pub fn of(predicted: &[f64], history: &[f64]) -> Self {
        let (mu_p, sigma_p) = moments(predicted);
        let (mu_h, sigma_h) = moments(history);
        Self {
            mu_h,
            sigma_h,
            mu_p,
            sigma_p,
        }
    }
}

/// Rescales `predicted` to the history's moments:
/// `(x - mu_p) / sigma_p * sigma_h + mu_h`.
pub fn gaussian_match_moments(
    predicted: &Series,
    m: &MomentPair,
) -> Result<Series, PostprocessError> {
    if !(m.sigma_p > SIGMA_EPS) {
        return Err(PostprocessError::DegeneratePrediction { sigma: m.sigma_p });
    }
    if m.mu_p == m.mu_h && m.sigma_p == m.sigma_h {
        return Ok(predicted.clone());
    }
    let scale = m.sigma_h / m.sigma_p;
    let out = predicted
        .values()
        .iter()
        .map(|x| (x - m.mu_p) * scale + m.mu_h)
        .collect();
    Ok(predicted
        .with_values(out)
        .expect("affine map of finite values"))
}

pub fn gaussian_match(
    predicted_high: &Series,
    hist_high: &Series,
) -> Result<Series, PostprocessError> {
    gaussian_match_moments(
        predicted_high,
        &MomentPair::of(predicted_high.values(), hist_high.values()),
    )
}

pub fn recombine(low: &Series, high: &Series) -> Result<Series, PostprocessError> {
    if low.len() != high.len() {
        return Err(PostprocessError::DimensionMismatch {
            expected: low.len(),
            got: high.len(),
        });
    }
    let sum = low
        .values()
        .iter()
        .zip(high.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(low.with_values(sum).expect("sum of finite values"))
}
