//! Deterministic offline backend that imitates common LLM behaviours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Completion, GatewayError, GenParams};
use crate::codec::{ChannelOffset, PromptBundle};

/// Half-width of the noise added in `Noisy` mode, in prompt units.
pub const NOISE_HALF_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MockMode {
    /// Cycles through the last `period` history rows; `period = 1` repeats
    /// the final row.
    Persistence { period: usize },
    /// Persistence (period 1) plus seeded uniform noise kept inside each
    /// channel's band.
    Noisy,
    /// Persistence (period 1) with the final value cut after its decimal
    /// point and no trailing terminator.
    Truncated,
    /// The first history row repeated verbatim.
    RepeatLine,
}

impl MockMode {
    pub fn persistence() -> Self {
        Self::Persistence { period: 1 }
    }
}

impl std::fmt::Display for MockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Persistence { period: 1 } => write!(f, "persistence"),
            Self::Persistence { period } => write!(f, "persistence:{period}"),
            Self::Noisy => write!(f, "noisy"),
            Self::Truncated => write!(f, "truncated"),
            Self::RepeatLine => write!(f, "repeat_line"),
        }
    }
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("persistence", None) => Ok(Self::persistence()),
            ("persistence", Some(p)) => match p.parse::<usize>() {
                Ok(period) if period >= 1 => Ok(Self::Persistence { period }),
                _ => Err(format!("invalid persistence period {p:?}")),
            },
            ("noisy", None) => Ok(Self::Noisy),
            ("truncated", None) => Ok(Self::Truncated),
            ("repeat_line" | "repeat-line", None) => Ok(Self::RepeatLine),
            _ => Err(format!("unknown mock mode {s:?}")),
        }
    }
}

fn history_rows(prompt: &PromptBundle) -> Result<Vec<Vec<String>>, GatewayError> {
    let rows: Vec<Vec<String>> = prompt
        .body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|t| t.trim().to_string()).collect())
        .collect();
    let well_formed = !rows.is_empty()
        && prompt.expected_cols >= 1
        && rows
            .iter()
            .all(|r| r.len() == prompt.expected_cols && r.iter().all(|t| t.parse::<f64>().is_ok()));
    if !well_formed {
        return Err(GatewayError::UnparseablePrompt);
    }
    Ok(rows)
}

fn prompt_seed(prompt: &PromptBundle, seed: u64) -> u64 {
    let digest = Sha256::new()
        .chain_update(prompt.text().as_bytes())
        .chain_update(seed.to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn jitter(token: &str, off: Option<&ChannelOffset>, rng: &mut ChaCha8Rng) -> String {
    let decimals = token.split_once('.').map_or(0, |(_, f)| f.len());
    let value: f64 = token.parse().expect("validated numeric token");
    let (lo, hi) = off.map_or((value.floor(), value.floor() + 1.0), ChannelOffset::band);
    let noisy = (value + rng.gen_range(-NOISE_HALF_WIDTH..=NOISE_HALF_WIDTH)).clamp(lo, hi);
    format!("{noisy:.decimals$}")
}

/// Produces `expected_rows` output rows from the prompt's history.
pub fn mock_generate(
    prompt: &PromptBundle,
    mode: MockMode,
    seed: u64,
) -> Result<String, GatewayError> {
    let rows = history_rows(prompt)?;
    let n = prompt.expected_rows.max(1);
    let join = |r: &[String]| r.join(", ");
    let mut out = String::new();
    match mode {
        MockMode::Persistence { period } => {
            let period = period.clamp(1, rows.len());
            let tail = &rows[rows.len() - period..];
            for i in 0..n {
                out.push_str(&join(&tail[i % period]));
                out.push('\n');
            }
        }
        MockMode::Noisy => {
            let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(prompt, seed));
            let last = rows.last().expect("non-empty");
            for _ in 0..n {
                let row: Vec<String> = last
                    .iter()
                    .enumerate()
                    .map(|(j, t)| jitter(t, prompt.offsets.get(j), &mut rng))
                    .collect();
                out.push_str(&join(&row));
                out.push('\n');
            }
        }
        MockMode::Truncated => {
            let last = join(rows.last().expect("non-empty"));
            for _ in 0..n {
                out.push_str(&last);
                out.push('\n');
            }
            out.pop();
            // keep everything up to and including the final decimal point
            match out.rfind('.') {
                Some(dot) if dot > out.rfind('\n').map_or(0, |p| p + 1) => out.truncate(dot + 1),
                _ => out.push('.'),
            }
        }
        MockMode::RepeatLine => {
            let first = join(&rows[0]);
            for _ in 0..n {
                out.push_str(&first);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    mode: MockMode,
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        Self { mode }
    }

    pub fn mode(&self) -> MockMode {
        self.mode
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", self.mode)
    }

    fn complete(
        &self,
        prompt: &PromptBundle,
        params: &GenParams,
    ) -> Result<Completion, GatewayError> {
        let text = mock_generate(prompt, self.mode, params.seed)?;
        Ok(Completion {
            text,
            usage: None,
            // simulated backends take no wall-clock time
            latency_ms: Some(0.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{parse_output, CodecConfig, DropReason, Layout, INSTRUCTION};

    fn bundle(body: &str, rows: usize, cols: usize) -> PromptBundle {
        PromptBundle {
            instruction: INSTRUCTION.into(),
            body: body.into(),
            expected_rows: rows,
            expected_cols: cols,
            layout: if cols == 1 {
                Layout::Univariate
            } else {
                Layout::Multivariate
            },
            offsets: ChannelOffset::default_set(cols, 2),
        }
    }

    #[test]
    fn persistence_repeats_last_row() {
        let p = bundle("0.10, 1.20\n0.40, 1.60\n", 2, 2);
        assert_eq!(
            mock_generate(&p, MockMode::persistence(), 7).unwrap(),
            "0.40, 1.60\n0.40, 1.60\n"
        );
        assert_eq!(
            mock_generate(&p, MockMode::Persistence { period: 2 }, 7).unwrap(),
            "0.10, 1.20\n0.40, 1.60\n"
        );
    }

    #[test]
    fn truncated_loses_exactly_one_row() {
        let p = bundle("0.10, 1.20\n0.40, 1.60\n0.45, 1.65\n", 3, 2);
        let out = mock_generate(&p, MockMode::Truncated, 0).unwrap();
        assert!(out.ends_with("0.45, 1."));
        let r = parse_output(&out, 2, &p.offsets, 3, &CodecConfig::default());
        assert_eq!((r.valid_rows, r.dropped_rows), (2, 1));
        assert_eq!(r.dropped_reasons[0].reason, DropReason::IncompleteValue);
        assert_eq!(r.dropped_reasons[0].row, 2);
    }

    #[test]
    fn noisy_stays_in_band_and_is_seeded() {
        let p = bundle("0.02, 1.99, 2.50\n", 40, 3);
        let a = mock_generate(&p, MockMode::Noisy, 3).unwrap();
        assert_eq!(a, mock_generate(&p, MockMode::Noisy, 3).unwrap());
        assert_ne!(a, mock_generate(&p, MockMode::Noisy, 4).unwrap());
        for line in a.lines() {
            for (j, t) in line.split(", ").enumerate() {
                let v: f64 = t.parse().unwrap();
                assert!(v >= j as f64 && v <= j as f64 + 1.0, "{v} in column {j}");
            }
        }
        let r = parse_output(&a, 3, &p.offsets, 40, &CodecConfig::default());
        assert_eq!(r.valid_rows, 40);
    }

    #[test]
    fn repeat_line_and_errors() {
        let p = bundle("0.10\n0.40\n", 3, 1);
        assert_eq!(
            mock_generate(&p, MockMode::RepeatLine, 0).unwrap(),
            "0.10\n0.10\n0.10\n"
        );
        let bad = bundle("hello\n", 2, 1);
        assert!(matches!(
            mock_generate(&bad, MockMode::persistence(), 0),
            Err(GatewayError::UnparseablePrompt)
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for s in [
            "persistence",
            "persistence:48",
            "noisy",
            "truncated",
            "repeat_line",
        ] {
            let m: MockMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("persistence:0".parse::<MockMode>().is_err());
        assert!("chaos".parse::<MockMode>().is_err());
    }
}
