//! Point and distributional error metrics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("metric needs non-empty inputs")]
    EmptySample,
}

fn paired(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    paired(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    paired(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the two
/// right-continuous empirical CDFs over the pooled sample points.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut best = 0usize;
    // compare integer counts scaled by the other sample size to avoid
    // rounding differences between equal fractions
    while i < n && j < m {
        let t = if xs[i] <= ys[j] { xs[i] } else { ys[j] };
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        best = best.max((i * m).abs_diff(j * n));
    }
    Ok(best as f64 / (n * m) as f64)
}
