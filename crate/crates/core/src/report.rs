//! Evaluation report structure and its JSON / CSV / plot-data renderings.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Metric names in the order they are aggregated and plotted.
pub const METRICS: [&str; 7] = [
    "mse", "mae", "mse_low", "mae_low", "ks_high", "mse_raw", "mae_raw",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("serialization error: {0}")]
    Serialize(String),
    #[error("unknown report format {0:?} (expected json, csv or plotdata)")]
    UnknownFormat(String),
}

/// Scores for one channel of one evaluation window. Values are in the
/// history-normalized space except the `_raw` ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    pub offset: usize,
    pub channel: usize,
    pub f_cut: f64,
    /// Rows scored: the shorter of the two components' valid prefixes.
    pub valid_rows: usize,
    /// Rejected lines across both component outputs.
    pub dropped_rows: usize,
    /// Fewer than `horizon` rows were scored.
    pub short: bool,
    pub refined: bool,
    pub gaussian_matched: bool,
    pub mse: f64,
    pub mae: f64,
    pub mse_low: Option<f64>,
    pub mae_low: Option<f64>,
    pub ks_high: Option<f64>,
    pub mse_raw: f64,
    pub mae_raw: f64,
}

impl WindowRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "mse" => Some(self.mse),
            "mae" => Some(self.mae),
            "mse_low" => self.mse_low,
            "mae_low" => self.mae_low,
            "ks_high" => self.ks_high,
            "mse_raw" => Some(self.mse_raw),
            "mae_raw" => Some(self.mae_raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFailure {
    pub window: usize,
    pub offset: usize,
    pub stage: String,
    pub message: String,
}

/// Mean and population standard deviation over the records that have the
/// metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            n,
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAggregate {
    pub channel: usize,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub per_channel: Vec<ChannelAggregate>,
    pub overall: BTreeMap<String, Stat>,
}

fn stats_of<'a>(records: impl Iterator<Item = &'a WindowRecord> + Clone) -> BTreeMap<String, Stat> {
    METRICS
        .iter()
        .filter_map(|&m| {
            let vals: Vec<f64> = records.clone().filter_map(|r| r.metric(m)).collect();
            Stat::of(&vals).map(|s| (m.to_string(), s))
        })
        .collect()
}

impl Aggregates {
    pub fn compute(records: &[WindowRecord]) -> Self {
        let mut channels: Vec<usize> = records.iter().map(|r| r.channel).collect();
        channels.sort_unstable();
        channels.dedup();
        Self {
            per_channel: channels
                .into_iter()
                .map(|c| ChannelAggregate {
                    channel: c,
                    metrics: stats_of(records.iter().filter(move |r| r.channel == c)),
                })
                .collect(),
            overall: stats_of(records.iter()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub calls: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub total_ms: f64,
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let total: f64 = samples.iter().sum();
        Self {
            calls: samples.len(),
            mean_ms: total / samples.len() as f64,
            max_ms: samples.iter().copied().fold(0.0, f64::max),
            total_ms: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerStatus {
    pub enabled: bool,
    pub trained: bool,
    pub calibration_windows: usize,
    pub train_pairs: usize,
    pub final_val_loss: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub backend_id: String,
    pub seed: u64,
    pub horizon: usize,
    pub alpha: f64,
    pub channels: Vec<usize>,
    pub windows_total: usize,
    pub windows_scored: usize,
    pub windows_failed: usize,
    pub refiner: RefinerStatus,
    pub latency: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub run: RunMetadata,
    pub windows: Vec<WindowRecord>,
    pub failures: Vec<WindowFailure>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, ReportError> {
        serde_json::to_string_pretty(self).map_err(|e| ReportError::Serialize(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ReportError> {
        serde_json::from_str(s).map_err(|e| ReportError::Serialize(e.to_string()))
    }
}

/// Flat CSV row; the leading columns are the headline metrics.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    mse: f64,
    mae: f64,
    ks: Option<f64>,
    window: usize,
    channel: usize,
    offset: usize,
    f_cut: f64,
    valid_rows: usize,
    dropped_rows: usize,
    short: bool,
    refined: bool,
    gaussian_matched: bool,
    mse_low: Option<f64>,
    mae_low: Option<f64>,
    mse_raw: f64,
    mae_raw: f64,
}

const CSV_HEADER: [&str; 16] = [
    "mse",
    "mae",
    "ks",
    "window",
    "channel",
    "offset",
    "f_cut",
    "valid_rows",
    "dropped_rows",
    "short",
    "refined",
    "gaussian_matched",
    "mse_low",
    "mae_low",
    "mse_raw",
    "mae_raw",
];

impl From<&WindowRecord> for CsvRow {
    fn from(r: &WindowRecord) -> Self {
        Self {
            mse: r.mse,
            mae: r.mae,
            ks: r.ks_high,
            window: r.window,
            channel: r.channel,
            offset: r.offset,
            f_cut: r.f_cut,
            valid_rows: r.valid_rows,
            dropped_rows: r.dropped_rows,
            short: r.short,
            refined: r.refined,
            gaussian_matched: r.gaussian_matched,
            mse_low: r.mse_low,
            mae_low: r.mae_low,
            mse_raw: r.mse_raw,
            mae_raw: r.mae_raw,
        }
    }
}

impl From<CsvRow> for WindowRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            window: r.window,
            offset: r.offset,
            channel: r.channel,
            f_cut: r.f_cut,
            valid_rows: r.valid_rows,
            dropped_rows: r.dropped_rows,
            short: r.short,
            refined: r.refined,
            gaussian_matched: r.gaussian_matched,
            mse: r.mse,
            mae: r.mae,
            mse_low: r.mse_low,
            mae_low: r.mae_low,
            ks_high: r.ks,
            mse_raw: r.mse_raw,
            mae_raw: r.mae_raw,
        }
    }
}

/// One row per (window, channel).
pub fn to_csv(report: &EvalReport) -> Result<String, ReportError> {
    let ser = |e: csv::Error| ReportError::Serialize(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(ser)?;
    for r in &report.windows {
        w.serialize(CsvRow::from(r)).map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Serialize(e.to_string()))
}

pub fn records_from_csv(text: &str) -> Result<Vec<WindowRecord>, ReportError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<CsvRow>()
        .map(|r| {
            r.map(WindowRecord::from)
                .map_err(|e| ReportError::Serialize(e.to_string()))
        })
        .collect()
}

fn tidy_csv(rows: impl IntoIterator<Item = (String, String, f64)>) -> Result<String, ReportError> {
    let ser = |e: csv::Error| ReportError::Serialize(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "series", "value"]).map_err(ser)?;
    for (x, series, value) in rows {
        w.write_record([x, series, value.to_string()])
            .map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Serialize(e.to_string()))
}

/// Tidy `x,series,value` rows: window index against `<metric>:ch<channel>`.
pub fn to_plotdata(report: &EvalReport) -> Result<String, ReportError> {
    tidy_csv(report.windows.iter().flat_map(|r| {
        METRICS.iter().filter_map(move |&m| {
            r.metric(m)
                .map(|v| (r.window.to_string(), format!("{m}:ch{}", r.channel), v))
        })
    }))
}

/// Valid output lines obtained for one feature count from one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub features: usize,
    pub backend: String,
    pub valid_lines: usize,
    pub expected_lines: usize,
}

/// One `x,series,value` row per (feature count, backend).
pub fn sweep_plotdata(points: &[SweepPoint]) -> Result<String, ReportError> {
    tidy_csv(points.iter().map(|p| {
        (
            p.features.to_string(),
            p.backend.clone(),
            p.valid_lines as f64,
        )
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

impl ReportFormat {
    pub const ALL: [Self; 3] = [Self::Json, Self::Csv, Self::Plotdata];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Json => "report.json",
            Self::Csv => "report.csv",
            Self::Plotdata => "plotdata.csv",
        }
    }

    pub fn render(self, report: &EvalReport) -> Result<String, ReportError> {
        match self {
            Self::Json => report.to_json(),
            Self::Csv => to_csv(report),
            Self::Plotdata => to_plotdata(report),
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "plotdata" => Ok(Self::Plotdata),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the report in `format` under `dir` and returns the file path.
pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    dir: &Path,
) -> Result<PathBuf, ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(format.file_name());
    write_text(&path, &format.render(report)?)?;
    Ok(path)
}
