//! Low/high frequency decomposition and cutoff selection.
//!
//! The low component is a zero-phase Butterworth low-pass of the input and
//! the high component is the residual, so `low + high` reproduces the input.
//! The cutoff is chosen from a fixed grid by minimizing
//! `alpha * mse(s, low) + (1 - alpha) / cos(s, high)`.

pub mod filter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Series;
pub use filter::{design_lowpass, lowpass, FilterSpec};

/// Cutoff grid in Hz at the default 100 Hz sample rate.
pub const DEFAULT_GRID_HZ: [f64; 6] = [2.5, 5.0, 7.5, 10.0, 12.5, 15.0];
pub const DEFAULT_ALPHA: f64 = 0.7;
/// Cosine similarities at or below this are treated as degenerate.
pub const COSINE_EPS: f64 = 1e-9;
/// A high component whose norm is below this fraction of the input's norm
/// is numerically zero.
pub const RESIDUAL_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error("cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist_hz} Hz)")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("series of length {len} is shorter than the filter minimum {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("cosine similarity {0} is not positive; candidate skipped")]
    DegenerateCosine(f64),
    #[error("every cutoff candidate had a degenerate high-frequency component")]
    AllCandidatesDegenerate,
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("cutoff grid is empty")]
    EmptyGrid,
}

/// One grid point evaluated during cutoff search. `metric` is `None` when the
/// candidate was skipped because its cosine similarity was degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffTrial {
    pub f: f64,
    pub m_mse: f64,
    pub m_cos: f64,
    pub m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySplit {
    pub low: Series,
    pub high: Series,
    pub f_cut: f64,
    pub alpha: f64,
    pub trace: Vec<CutoffTrial>,
}

pub fn butterworth_lowpass(s: &Series, spec: &FilterSpec) -> Result<Series, DecomposeError> {
    let y = lowpass(s.values(), spec)?;
    Ok(s.with_values(y).expect("filter output is finite"))
}

/// Returns `(low, high)` with `high = s - low`.
pub fn decompose_at(s: &Series, spec: &FilterSpec) -> Result<(Series, Series), DecomposeError> {
    let low = butterworth_lowpass(s, spec)?;
    let high: Vec<f64> = s
        .values()
        .iter()
        .zip(low.values())
        .map(|(x, l)| x - l)
        .collect();
    let high = s.with_values(high).expect("residual is finite");
    Ok((low, high))
}

pub fn weighted_metric(m_mse: f64, m_cos: f64, alpha: f64) -> Result<f64, DecomposeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DecomposeError::InvalidAlpha(alpha));
    }
    if m_cos.is_nan() || m_cos <= COSINE_EPS {
        return Err(DecomposeError::DegenerateCosine(m_cos));
    }
    Ok(alpha * m_mse + (1.0 - alpha) * (1.0 / m_cos))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Cosine similarity; 0 when either vector is zero or `b` is round-off
/// relative to `a` (norm ratio below [`RESIDUAL_EPS`]).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb <= RESIDUAL_EPS * na {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Evaluates every grid cutoff and keeps the split minimizing the weighted
/// metric. Ties go to the lowest frequency.
pub fn select_cutoff(
    s: &Series,
    grid: &[f64],
    alpha: f64,
    spec_defaults: &FilterSpec,
) -> Result<FrequencySplit, DecomposeError> {
    if grid.is_empty() {
        return Err(DecomposeError::EmptyGrid);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DecomposeError::InvalidAlpha(alpha));
    }
    let mut trace = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Series, Series)> = None;

    for &f in grid {
        let (low, high) = decompose_at(s, &spec_defaults.with_cutoff(f))?;
        let m_mse = mse(s.values(), low.values());
        let m_cos = cosine_similarity(s.values(), high.values());
        let m = match weighted_metric(m_mse, m_cos, alpha) {
            Ok(m) => m,
            Err(DecomposeError::DegenerateCosine(_)) => {
                trace.push(CutoffTrial {
                    f,
                    m_mse,
                    m_cos,
                    m: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        trace.push(CutoffTrial {
            f,
            m_mse,
            m_cos,
            m: Some(m),
        });
        let better = match &best {
            None => true,
            Some((bm, bf, _, _)) => m < *bm || (m == *bm && f < *bf),
        };
        if better {
            best = Some((m, f, low, high));
        }
    }

    let (_, f_cut, low, high) = best.ok_or(DecomposeError::AllCandidatesDegenerate)?;
    Ok(FrequencySplit {
        low,
        high,
        f_cut,
        alpha,
        trace,
    })
}
