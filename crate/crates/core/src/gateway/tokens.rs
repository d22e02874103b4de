//! Approximate token accounting for numeric prompts.
//!
//! Two schemes are modelled. `PerChar` mirrors tokenizers that split numbers
//! into single characters ("3.75" is four tokens). `BpeGrouped` mirrors
//! byte-pair encoders that keep digit runs together ("3.75" is three
//! tokens). In both, a run of plain spaces directly before a visible
//! character is folded into that character's token, the way word-boundary
//! markers are in sentencepiece and GPT vocabularies; any other whitespace
//! run (newlines, tabs, trailing spaces) is one token.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    PerChar,
    BpeGrouped,
}

impl std::str::FromStr for TokenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_char" | "per-char" => Ok(Self::PerChar),
            "bpe_grouped" | "bpe-grouped" | "bpe" => Ok(Self::BpeGrouped),
            other => Err(format!("unknown token scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenScheme {
    pub kind: TokenKind,
    pub context_limit: usize,
}

impl TokenScheme {
    pub fn per_char(context_limit: usize) -> Self {
        Self {
            kind: TokenKind::PerChar,
            context_limit,
        }
    }

    pub fn bpe_grouped(context_limit: usize) -> Self {
        Self {
            kind: TokenKind::BpeGrouped,
            context_limit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Letter,
    Space,
    OtherSpace,
    Other,
}

fn class_of(c: char) -> Class {
    if c.is_ascii_digit() {
        Class::Digit
    } else if c == ' ' {
        Class::Space
    } else if c.is_whitespace() {
        Class::OtherSpace
    } else if c.is_alphabetic() {
        Class::Letter
    } else {
        Class::Other
    }
}

pub fn count_tokens(text: &str, kind: TokenKind) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut i = 0;
    while i < chars.len() {
        match class_of(chars[i]) {
            Class::Space | Class::OtherSpace => {
                let start = i;
                while i < chars.len() && chars[i].is_whitespace() {
                    i += 1;
                }
                let only_spaces = chars[start..i].iter().all(|&c| c == ' ');
                // a space-only run is absorbed by the token that follows it
                if !(only_spaces && i < chars.len()) {
                    count += 1;
                }
            }
            class @ (Class::Digit | Class::Letter) if kind == TokenKind::BpeGrouped => {
                while i < chars.len() && class_of(chars[i]) == class {
                    i += 1;
                }
                count += 1;
            }
            _ => {
                i += 1;
                count += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub total: usize,
    pub limit: usize,
    pub feasible: bool,
    pub max_feasible_features: usize,
}

/// Widest rendering of any value in channel `i`'s band `[i, i + 1]`.
fn widest_value(channel: usize, decimals: u32) -> String {
    let top = format!("{}.{}", channel + 1, "0".repeat(decimals as usize));
    let inner = format!("{}.{}", channel, "9".repeat(decimals as usize));
    if top.len() >= inner.len() {
        top
    } else {
        inner
    }
}

/// Body of `rows` rows over `features` channels with every value at its
/// band's maximum width.
pub fn worst_case_body(rows: usize, features: usize, cfg: &CodecConfig) -> String {
    let row = (0..features)
        .map(|c| widest_value(c, cfg.decimals))
        .collect::<Vec<_>>()
        .join(&cfg.separator);
    let mut body = String::with_capacity(rows * (row.len() + 1));
    for _ in 0..rows {
        body.push_str(&row);
        body.push_str(&cfg.terminator);
    }
    body
}

fn tokens_for(rows: usize, features: usize, kind: TokenKind, cfg: &CodecConfig) -> (usize, usize) {
    let body = worst_case_body(rows, features, cfg);
    let input = count_tokens(&format!("{INSTRUCTION}\n{body}"), kind);
    // the model is asked for as many rows as it was given
    let output = count_tokens(&body, kind);
    (input, output)
}

/// Context usage of a worst-case prompt for `features` channels and `rows`
/// time steps, plus its generated continuation.
pub fn budget(
    rows: usize,
    features: usize,
    scheme: &TokenScheme,
    cfg: &CodecConfig,
) -> BudgetReport {
    let (input_tokens, output_tokens) = tokens_for(rows, features, scheme.kind, cfg);
    let total = input_tokens + output_tokens;
    let max_feasible_features = (1..=features)
        .take_while(|&c| {
            let (i, o) = tokens_for(rows, c, scheme.kind, cfg);
            i + o <= scheme.context_limit
        })
        .last()
        .unwrap_or(0);
    BudgetReport {
        input_tokens,
        output_tokens,
        total,
        limit: scheme.context_limit,
        feasible: total <= scheme.context_limit,
        max_feasible_features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn count_examples() {
        assert_eq!(count_tokens("3.75", TokenKind::PerChar), 4);
        assert_eq!(count_tokens("3.75", TokenKind::BpeGrouped), 3);
        assert_eq!(count_tokens("", TokenKind::PerChar), 0);
        assert_eq!(count_tokens("", TokenKind::BpeGrouped), 0);
    }

    #[test]
    fn whitespace_rules() {
        // "0" "." "3" "4" "," " 1" "." "5" "4" "\n"
        assert_eq!(count_tokens("0.34, 1.54\n", TokenKind::PerChar), 10);
        // "0" "." "34" "," " 1" "." "54" "\n"
        assert_eq!(count_tokens("0.34, 1.54\n", TokenKind::BpeGrouped), 8);
        assert_eq!(count_tokens("a  ", TokenKind::PerChar), 2);
        assert_eq!(count_tokens("a \n b", TokenKind::PerChar), 3);
        assert_eq!(count_tokens("Predict the", TokenKind::BpeGrouped), 2);
        assert_eq!(count_tokens("Predict the", TokenKind::PerChar), 10);
    }

    #[test]
    fn worst_case_widths() {
        let cfg = CodecConfig::default();
        assert_eq!(
            worst_case_body(2, 3, &cfg),
            "1.00, 2.00, 3.00\n1.00, 2.00, 3.00\n"
        );
        assert_eq!(widest_value(9, 2), "10.00");
        assert_eq!(widest_value(0, 1), "1.0");
    }

    #[test]
    fn budget_examples() {
        let cfg = CodecConfig::default();
        let s = TokenScheme::per_char(4096);
        assert!(!budget(96, 5, &s, &cfg).feasible);
        assert!(!budget(48, 9, &s, &cfg).feasible);
        let one = budget(48, 1, &s, &cfg);
        assert!(one.feasible);
        // 48 rows of "1.00\n"
        assert_eq!(one.output_tokens, 48 * 5);
        assert_eq!(one.total, one.input_tokens + one.output_tokens);
        assert_eq!(one.max_feasible_features, 1);
    }

    #[test]
    fn feasibility_boundaries() {
        let cfg = CodecConfig::default();
        let s = TokenScheme::per_char(4096);
        let m96 = budget(96, 10, &s, &cfg).max_feasible_features;
        let m48 = budget(48, 12, &s, &cfg).max_feasible_features;
        assert!((4..=6).contains(&m96), "{m96}");
        assert!((8..=10).contains(&m48), "{m48}");
    }

    #[test]
    fn grouped_never_less_feasible() {
        let cfg = CodecConfig::default();
        for c in 1..=10 {
            let p = budget(96, c, &TokenScheme::per_char(4096), &cfg);
            let b = budget(96, c, &TokenScheme::bpe_grouped(4096), &cfg);
            assert!(b.total <= p.total);
            assert!(b.feasible || !p.feasible);
        }
    }

    proptest! {
        #[test]
        fn near_additive_over_concatenation(a in "[0-9a-z ,.\n]{0,30}", b in "[0-9a-z ,.\n]{0,30}") {
            for kind in [TokenKind::PerChar, TokenKind::BpeGrouped] {
                let joined = count_tokens(&format!("{a}{b}"), kind);
                let sum = count_tokens(&a, kind) + count_tokens(&b, kind);
                prop_assert!(joined <= sum);
                prop_assert!(joined + 1 >= sum);
            }
        }
    }
}
