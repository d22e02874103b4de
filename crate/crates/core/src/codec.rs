//! Numeric <-> text conversion for LLM prompts.
//!
//! A normalized value `x` in `[-1, 1]` for channel `i` is written as
//! `0.5 * x + c` with `c = i + 0.5`, so every channel owns the band
//! `[i, i + 1]` and its integer part identifies the channel. Multivariate
//! prompts put one time step per row with values joined by `", "`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ChannelSet;

/// Instruction prepended to every prompt.
pub const INSTRUCTION: &str = "Consider the distribution. Predict the next few lines. INTEGER component of the value SHOULD be SAME as the train data. ONLY provide numerical values.";

pub const DEFAULT_DECIMALS: u32 = 2;
const RANGE_SLACK: f64 = 1e-9;
/// Half-way detection tolerance, in units of the last rendered digit.
const HALF_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("value {0} is outside [-1, 1]")]
    OutOfRange(f64),
    #[error("{0:?} is not a decimal number")]
    NotANumber(String),
    #[error("value {value} is outside the band of channel {channel}")]
    BandViolation { value: f64, channel: usize },
    #[error("{offsets} offsets supplied for {channels} channels")]
    OffsetMismatch { offsets: usize, channels: usize },
    #[error("univariate layout requires exactly one channel, got {0}")]
    LayoutMismatch(usize),
    #[error("unsupported decimal precision {0} (expected 1 or 2)")]
    InvalidDecimals(u32),
}

/// Linear offset placing a channel's values in `[c - 0.5, c + 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOffset {
    pub c: f64,
    pub channel_index: usize,
    pub decimals: u32,
}

impl ChannelOffset {
    pub fn for_channel(channel_index: usize) -> Self {
        Self::with_decimals(channel_index, DEFAULT_DECIMALS)
    }

    pub fn with_decimals(channel_index: usize, decimals: u32) -> Self {
        Self {
            c: channel_index as f64 + 0.5,
            channel_index,
            decimals,
        }
    }

    /// Offsets for channels `0..n` under the default scheme.
    pub fn default_set(n: usize, decimals: u32) -> Vec<Self> {
        (0..n).map(|i| Self::with_decimals(i, decimals)).collect()
    }

    pub fn band(&self) -> (f64, f64) {
        (self.c - 0.5, self.c + 0.5)
    }

    fn quantum(&self) -> f64 {
        10f64.powi(-(self.decimals as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Univariate,
    Multivariate,
}

/// Text formatting knobs shared by the prompt builder and parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub decimals: u32,
    pub separator: String,
    pub terminator: String,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            decimals: DEFAULT_DECIMALS,
            separator: ", ".into(),
            terminator: "\n".into(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(1..=2).contains(&self.decimals) {
            return Err(CodecError::InvalidDecimals(self.decimals));
        }
        Ok(())
    }

    /// Character used to split a row into values; whitespace when the
    /// separator is pure whitespace.
    fn split_token(&self) -> Option<&str> {
        let t = self.separator.trim();
        (!t.is_empty()).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub body: String,
    pub expected_rows: usize,
    pub expected_cols: usize,
    pub layout: Layout,
    pub offsets: Vec<ChannelOffset>,
}

impl PromptBundle {
    /// Full prompt: instruction, a newline, then the serialized history.
    pub fn text(&self) -> String {
        format!("{}\n{}", self.instruction, self.body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    IncompleteValue,
    WrongArity,
    NonNumeric,
    OutOfBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRow {
    /// 0-based line index in the raw output.
    pub row: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub valid_rows: usize,
    pub dropped_rows: usize,
    pub dropped_reasons: Vec<DroppedRow>,
    /// Decoded rows, each of `expected_cols` values in normalized space.
    pub values: Vec<Vec<f64>>,
}

impl ParseReport {
    /// Values of column `col` across all valid rows.
    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[col]).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.valid_rows + self.dropped_rows
    }
}

/// Rounds half away from zero and renders with exactly `decimals` digits.
fn render_fixed(v: f64, decimals: u32) -> String {
    let factor = 10f64.powi(decimals as i32);
    let scaled = v.abs() * factor;
    let floor = scaled.floor();
    let frac = scaled - floor;
    // values such as 0.565 are stored as 0.56499999..; treat them as halves
    let units = if frac >= 0.5 - HALF_TOLERANCE {
        floor + 1.0
    } else {
        floor
    } as u64;
    let div = factor as u64;
    let sign = if v < 0.0 && units != 0 { "-" } else { "" };
    format!(
        "{sign}{}.{:0width$}",
        units / div,
        units % div,
        width = decimals as usize
    )
}

pub fn encode_value(x: f64, off: &ChannelOffset) -> Result<String, CodecError> {
    if !(x.abs() <= 1.0 + RANGE_SLACK) {
        return Err(CodecError::OutOfRange(x));
    }
    let (lo, hi) = off.band();
    let v = (0.5 * x + off.c).clamp(lo, hi);
    Ok(render_fixed(v, off.decimals))
}

/// `[+-]digits[.digits]`
fn is_decimal(t: &str) -> bool {
    let t = t.strip_prefix(['+', '-']).unwrap_or(t);
    let (int, frac) = match t.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (t, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.is_none_or(digits)
}

/// A truncated number such as `"3."`, `"-"` or `""`.
fn is_partial_decimal(t: &str) -> bool {
    let t = t.strip_prefix(['+', '-']).unwrap_or(t);
    t.is_empty() || t == "." || (t.ends_with('.') && is_decimal(&t[..t.len() - 1]))
}

pub fn decode_value(t: &str, off: &ChannelOffset) -> Result<f64, CodecError> {
    let t = t.trim();
    if !is_decimal(t) {
        return Err(CodecError::NotANumber(t.to_string()));
    }
    let parsed: f64 = t
        .parse()
        .map_err(|_| CodecError::NotANumber(t.to_string()))?;
    let (lo, hi) = off.band();
    if parsed < lo - 0.5 || parsed > hi + 0.5 {
        return Err(CodecError::BandViolation {
            value: parsed,
            channel: off.channel_index,
        });
    }
    let q = off.quantum();
    Ok(((parsed - off.c) / 0.5).clamp(-1.0 - q, 1.0 + q))
}

/// Serializes a normalized history. Univariate bodies have one value per
/// line; multivariate bodies have one row per time step.
pub fn build_prompt(
    history: &ChannelSet,
    offsets: &[ChannelOffset],
    layout: Layout,
    cfg: &CodecConfig,
) -> Result<PromptBundle, CodecError> {
    cfg.validate()?;
    let n_ch = history.num_channels();
    if offsets.len() != n_ch {
        return Err(CodecError::OffsetMismatch {
            offsets: offsets.len(),
            channels: n_ch,
        });
    }
    if layout == Layout::Univariate && n_ch != 1 {
        return Err(CodecError::LayoutMismatch(n_ch));
    }
    let rows = history.len();
    let mut body = String::with_capacity(rows * n_ch * 6);
    for t in 0..rows {
        for (j, (ch, off)) in history.channels().iter().zip(offsets).enumerate() {
            if j > 0 {
                body.push_str(&cfg.separator);
            }
            body.push_str(&encode_value(ch.values()[t], off)?);
        }
        body.push_str(&cfg.terminator);
    }
    Ok(PromptBundle {
        instruction: INSTRUCTION.to_string(),
        body,
        expected_rows: rows,
        expected_cols: n_ch,
        layout,
        offsets: offsets.to_vec(),
    })
}

fn classify_row(
    line: &str,
    expected_cols: usize,
    offsets: &[ChannelOffset],
    cfg: &CodecConfig,
) -> Result<Vec<f64>, DropReason> {
    let tokens: Vec<&str> = match cfg.split_token() {
        Some(sep) => line.split(sep).map(str::trim).collect(),
        None => line.split_whitespace().collect(),
    };
    if tokens
        .iter()
        .any(|t| !is_decimal(t) && !is_partial_decimal(t))
    {
        return Err(DropReason::NonNumeric);
    }
    if tokens.iter().any(|t| is_partial_decimal(t)) {
        return Err(DropReason::IncompleteValue);
    }
    if tokens.len() != expected_cols {
        return Err(DropReason::WrongArity);
    }
    tokens
        .iter()
        .zip(offsets)
        .map(|(t, off)| decode_value(t, off).map_err(|_| DropReason::OutOfBand))
        .collect()
}

/// Validates raw model output line by line. Never fails: malformed rows are
/// dropped and counted. Stops after `max_rows` valid rows.
pub fn parse_output(
    text: &str,
    expected_cols: usize,
    offsets: &[ChannelOffset],
    max_rows: usize,
    cfg: &CodecConfig,
) -> ParseReport {
    let mut report = ParseReport::default();
    if offsets.len() < expected_cols {
        // rows can never be decoded; count them all as out of band
        for (row, line) in text.lines().enumerate() {
            if !line.trim().is_empty() {
                report.dropped_rows += 1;
                report.dropped_reasons.push(DroppedRow {
                    row,
                    reason: DropReason::OutOfBand,
                });
            }
        }
        return report;
    }
    for (row, line) in text.lines().enumerate() {
        if report.valid_rows >= max_rows {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match classify_row(line, expected_cols, offsets, cfg) {
            Ok(values) => {
                report.valid_rows += 1;
                report.values.push(values);
            }
            Err(reason) => {
                report.dropped_rows += 1;
                report.dropped_reasons.push(DroppedRow { row, reason });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn off(i: usize) -> ChannelOffset {
        ChannelOffset::for_channel(i)
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_value(-1.0, &off(0)).unwrap(), "0.00");
        assert_eq!(encode_value(1.0, &off(1)).unwrap(), "2.00");
        assert_eq!(encode_value(0.134, &off(2)).unwrap(), "2.57");
        assert_eq!(encode_value(0.0, &off(0)).unwrap(), "0.50");
        assert!(matches!(
            encode_value(1.01, &off(0)),
            Err(CodecError::OutOfRange(_))
        ));
        assert_eq!(encode_value(1.0 + 1e-10, &off(0)).unwrap(), "1.00");
    }

    #[test]
    fn rounds_half_away_from_zero() {
        // 0.5 * 0.13 + 0.5 = 0.565 is not representable exactly
        assert_eq!(encode_value(0.13, &off(0)).unwrap(), "0.57");
        assert_eq!(encode_value(-0.99, &off(0)).unwrap(), "0.01");
        assert_eq!(render_fixed(-0.125, 2), "-0.13");
        assert_eq!(render_fixed(-0.001, 2), "0.00");
        assert_eq!(render_fixed(2.25, 1), "2.3");
        assert_eq!(
            encode_value(0.3, &ChannelOffset::with_decimals(0, 1)).unwrap(),
            "0.7"
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_value("0.00", &off(0)).unwrap(), -1.0);
        assert!((decode_value("2.57", &off(2)).unwrap() - 0.14).abs() < 1e-12);
        assert!(matches!(
            decode_value("7.90", &off(0)),
            Err(CodecError::BandViolation { channel: 0, .. })
        ));
        assert!(matches!(
            decode_value("2.", &off(0)),
            Err(CodecError::NotANumber(_))
        ));
        assert!(matches!(
            decode_value("abc", &off(0)),
            Err(CodecError::NotANumber(_))
        ));
        // just outside the band is clamped rather than rejected
        assert_eq!(decode_value("1.30", &off(0)).unwrap(), 1.01);
    }

    fn history(cols: Vec<Vec<f64>>) -> ChannelSet {
        ChannelSet::from_columns(cols).unwrap()
    }

    #[test]
    fn multivariate_body_layout() {
        // encoded values 0.34, 1.54, 2.67 / 0.31, 1.50, 2.60
        let h = history(vec![vec![-0.32, -0.38], vec![0.08, 0.0], vec![0.34, 0.2]]);
        let p = build_prompt(
            &h,
            &ChannelOffset::default_set(3, 2),
            Layout::Multivariate,
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(p.body, "0.34, 1.54, 2.67\n0.31, 1.50, 2.60\n");
        assert_eq!((p.expected_rows, p.expected_cols), (2, 3));
        assert_eq!(p.instruction, INSTRUCTION);
        assert_eq!(
            p.instruction.as_bytes(),
            b"Consider the distribution. Predict the next few lines. INTEGER component of the value SHOULD be SAME as the train data. ONLY provide numerical values."
        );
        assert!(p.text().starts_with(&format!("{INSTRUCTION}\n0.34")));
    }

    #[test]
    fn univariate_body_layout() {
        let h = history(vec![vec![-1.0, 0.0, 1.0]]);
        let p = build_prompt(&h, &[off(0)], Layout::Univariate, &CodecConfig::default()).unwrap();
        assert_eq!(p.body, "0.00\n0.50\n1.00\n");
        assert!(!p.body.contains(','));
        assert_eq!(
            build_prompt(&h, &[], Layout::Univariate, &CodecConfig::default()).unwrap_err(),
            CodecError::OffsetMismatch {
                offsets: 0,
                channels: 1
            }
        );
        let two = history(vec![vec![0.0], vec![0.0]]);
        assert_eq!(
            build_prompt(
                &two,
                &ChannelOffset::default_set(2, 2),
                Layout::Univariate,
                &CodecConfig::default()
            )
            .unwrap_err(),
            CodecError::LayoutMismatch(2)
        );
    }

    fn offs3() -> Vec<ChannelOffset> {
        ChannelOffset::default_set(3, 2)
    }

    #[test]
    fn parses_well_formed_rows() {
        let cfg = CodecConfig::default();
        let r = parse_output(
            "0.34, 1.54, 2.67\n0.31, 1.50, 2.60\n",
            3,
            &offs3(),
            10,
            &cfg,
        );
        assert_eq!((r.valid_rows, r.dropped_rows), (2, 0));
        assert!((r.values[0][2] - 0.34).abs() < 1e-12);
    }

    #[test]
    fn drops_incomplete_and_noise() {
        let cfg = CodecConfig::default();
        let r = parse_output("0.34, 1.54, 2.\n", 3, &offs3(), 10, &cfg);
        assert_eq!((r.valid_rows, r.dropped_rows), (0, 1));
        assert_eq!(r.dropped_reasons[0].reason, DropReason::IncompleteValue);

        let r = parse_output("noise noise\n0.40, 1.60, 2.50\n", 3, &offs3(), 10, &cfg);
        assert_eq!((r.valid_rows, r.dropped_rows), (1, 1));
        assert_eq!(
            r.dropped_reasons[0],
            DroppedRow {
                row: 0,
                reason: DropReason::NonNumeric
            }
        );
    }

    #[test]
    fn classifies_other_failures() {
        let cfg = CodecConfig::default();
        let r = parse_output(
            "0.34, 1.54\n0.34, 1.54, \n0.34, 7.54, 2.60\n0.34, 1.54, ...\n",
            3,
            &offs3(),
            10,
            &cfg,
        );
        let reasons: Vec<_> = r.dropped_reasons.iter().map(|d| d.reason).collect();
        assert_eq!(
            reasons,
            vec![
                DropReason::WrongArity,
                DropReason::IncompleteValue,
                DropReason::OutOfBand,
                DropReason::NonNumeric
            ]
        );
    }

    #[test]
    fn stops_at_max_rows_and_handles_empty() {
        let cfg = CodecConfig::default();
        let r = parse_output("0.5\n0.6\nxx\n0.7\n", 1, &[off(0)], 2, &cfg);
        assert_eq!((r.valid_rows, r.dropped_rows), (2, 0));
        assert_eq!(
            parse_output("", 1, &[off(0)], 5, &cfg),
            ParseReport::default()
        );
        let r = parse_output("\n\n  \n", 1, &[off(0)], 5, &cfg);
        assert_eq!(r.total_rows(), 0);
    }

    proptest! {
        #[test]
        fn round_trip_within_quantum(x in -1.0f64..=1.0, ch in 0usize..12) {
            let o = off(ch);
            let t = encode_value(x, &o).unwrap();
            let v: f64 = t.parse().unwrap();
            prop_assert!(v >= ch as f64 && v <= ch as f64 + 1.0);
            let back = decode_value(&t, &o).unwrap();
            prop_assert!((back - x).abs() <= 0.02);
        }

        #[test]
        fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let r = parse_output(&text, 2, &ChannelOffset::default_set(2, 2), 50, &CodecConfig::default());
            let non_empty = text.lines().filter(|l| !l.trim().is_empty()).count();
            prop_assert!(r.valid_rows < 50);
            prop_assert_eq!(r.valid_rows + r.dropped_rows, non_empty);
            prop_assert_eq!(r.dropped_rows, r.dropped_reasons.len());
            prop_assert!(r.values.iter().flatten().all(|v| v.is_finite()));
        }

        #[test]
        fn prompt_body_parses_back(
            rows in 1usize..20,
            seed_vals in prop::collection::vec(-1.0f64..=1.0, 60),
        ) {
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|c| (0..rows).map(|t| seed_vals[(c * 20 + t) % 60]).collect())
                .collect();
            let h = history(cols.clone());
            let cfg = CodecConfig::default();
            let p = build_prompt(&h, &offs3(), Layout::Multivariate, &cfg).unwrap();
            let r = parse_output(&p.body, 3, &offs3(), rows, &cfg);
            prop_assert_eq!(r.valid_rows, rows);
            for (c, col) in cols.iter().enumerate() {
                for (a, b) in r.column(c).iter().zip(col) {
                    prop_assert!((a - b).abs() <= 0.01 + 1e-12);
                }
            }
        }
    }
}
