//! Dataset ingestion, windowing and max-normalization.
//!
//! Datasets are CSV files with a header row whose first column is a
//! timestamp (ignored) and whose remaining columns are numeric features.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),
    #[error("could not read dataset: {0}")]
    Io(String),
    /// `row` is the 1-based data row (header excluded), `col` the 0-based
    /// column in the file (column 0 is the timestamp).
    #[error("non-numeric cell {value:?} at row {row}, column {col}")]
    ParseError {
        row: usize,
        col: usize,
        value: String,
    },
    #[error("dataset has no data rows or no feature columns")]
    EmptyDataset,
    #[error("channel index {index} out of range ({available} feature columns)")]
    ChannelOutOfRange { index: usize, available: usize },
    #[error("series of length {len} is too short for prediction length {horizon}")]
    SeriesTooShort { len: usize, horizon: usize },
    #[error("series contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("series is empty")]
    Empty,
    #[error("all values are zero; max-normalization is undefined")]
    DegenerateSeries,
    #[error("channels have unequal lengths ({expected} vs {found})")]
    RaggedChannels { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A single channel of finite real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    values: Vec<f64>,
    channel_id: usize,
}

impl Series {
    pub fn new(values: Vec<f64>, channel_id: usize) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self { values, channel_id })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel_id(&self) -> usize {
        self.channel_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same channel id, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, DataError> {
        Self::new(values, self.channel_id)
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        if start >= end || end > self.values.len() {
            return Err(DataError::InvalidArgument(format!(
                "slice {start}..{end} of series with length {}",
                self.values.len()
            )));
        }
        Self::new(self.values[start..end].to_vec(), self.channel_id)
    }
}

impl AsRef<[f64]> for Series {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Equal-length channels with ids `0..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    channels: Vec<Series>,
}

impl ChannelSet {
    /// Builds a set from raw columns, assigning channel ids in order.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let channels = columns
            .into_iter()
            .enumerate()
            .map(|(i, v)| Series::new(v, i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(channels)
    }

    /// Re-assigns channel ids to `0..C` in the given order.
    pub fn new(channels: Vec<Series>) -> Result<Self, DataError> {
        let first = channels.first().ok_or(DataError::EmptyDataset)?;
        let len = first.len();
        let mut out = Vec::with_capacity(channels.len());
        for (i, s) in channels.into_iter().enumerate() {
            if s.len() != len {
                return Err(DataError::RaggedChannels {
                    expected: len,
                    found: s.len(),
                });
            }
            out.push(Series {
                values: s.values,
                channel_id: i,
            });
        }
        Ok(Self { channels: out })
    }

    pub fn channels(&self) -> &[Series] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> Option<&Series> {
        self.channels.get(index)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Length `L` shared by every channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Projects onto the given channel indices; ids are remapped to `0..k`.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DataError> {
        let picked = indices
            .iter()
            .map(|&i| {
                self.channels
                    .get(i)
                    .cloned()
                    .ok_or(DataError::ChannelOutOfRange {
                        index: i,
                        available: self.channels.len(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(picked)
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        let channels = self
            .channels
            .iter()
            .map(|s| s.slice(start, end))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { channels })
    }
}

/// `history` and `target` both span `H` samples; `target` immediately
/// follows `history` in the source set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub offset: usize,
    pub history: ChannelSet,
    pub target: ChannelSet,
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    scale: f64,
}

impl NormState {
    pub fn new(scale: f64) -> Result<Self, DataError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(DataError::InvalidArgument(format!(
                "normalization scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Applies the forward scaling to arbitrary values (e.g. a target
    /// segment normalized with its history's scale).
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v / self.scale).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.scale).collect()
    }
}

/// Reads an ETT-style CSV. `selected_channels` indexes feature columns
/// (the timestamp column is not counted).
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    selected_channels: Option<&[usize]>,
) -> Result<ChannelSet, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io(e.to_string()))?;
    let n_cols = reader
        .headers()
        .map_err(|e| DataError::Io(e.to_string()))?
        .len();
    if n_cols < 2 {
        return Err(DataError::EmptyDataset);
    }
    let features: Vec<usize> = match selected_channels {
        Some(sel) => {
            for &i in sel {
                if i + 1 >= n_cols {
                    return Err(DataError::ChannelOutOfRange {
                        index: i,
                        available: n_cols - 1,
                    });
                }
            }
            sel.to_vec()
        }
        None => (0..n_cols - 1).collect(),
    };
    if features.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut columns = vec![Vec::new(); features.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Io(e.to_string()))?;
        let row = r + 1;
        for (slot, &feature) in features.iter().enumerate() {
            let col = feature + 1;
            let cell = record.get(col).unwrap_or("");
            let value = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::ParseError {
                    row,
                    col,
                    value: cell.to_string(),
                })?;
            columns[slot].push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(DataError::EmptyDataset);
    }
    ChannelSet::from_columns(columns)
}

/// Cuts `(history, target)` windows of `horizon` samples each, starting at
/// offsets `0, stride, 2*stride, ...`; windows that would overrun are dropped.
pub fn split_windows(
    set: &ChannelSet,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>, DataError> {
    if horizon == 0 || stride == 0 {
        return Err(DataError::InvalidArgument(
            "horizon and stride must be positive".into(),
        ));
    }
    let len = set.len();
    if len < 2 * horizon {
        return Err(DataError::SeriesTooShort { len, horizon });
    }
    (0..=len - 2 * horizon)
        .step_by(stride)
        .map(|offset| {
            Ok(Window {
                offset,
                history: set.slice(offset, offset + horizon)?,
                target: set.slice(offset + horizon, offset + 2 * horizon)?,
            })
        })
        .collect()
}

/// Divides by `max |x|` so the result lies in `[-1, 1]`.
pub fn max_normalize(s: &Series) -> Result<(Series, NormState), DataError> {
    let scale = s.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(DataError::DegenerateSeries);
    }
    let state = NormState::new(scale)?;
    let normalized = s.with_values(state.apply(s.values()))?;
    Ok((normalized, state))
}

pub fn denormalize(s: &Series, state: &NormState) -> Series {
    // scaling finite values by a finite positive scale stays finite
    Series {
        values: state.invert(s.values()),
        channel_id: s.channel_id(),
    }
}
