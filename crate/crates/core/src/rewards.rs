//! Verifiable rewards: final-answer extraction, format adherence, and the
//! dual correctness + format reward.
//!
//! Answers compare as exact decimals (arbitrary-precision integer plus
//! scale), so "460" == "460.0" == "4,60" never happens by float accident and
//! "1,000" ≡ "1000" holds by normalization.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::BigInt;
use regex::Regex;

use crate::error::{Error, Result};

/// The literal completion marker; text after its last occurrence is the
/// model's final answer.
pub const ANSWER_MARKER: &str = "#### The final answer is ";

/// Exact decimal: value = mantissa / 10^scale, normalized so equal values
/// have equal representations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactDecimal {
    mantissa: BigInt,
    scale: u32,
}

impl ExactDecimal {
    /// Strict parse of a signed decimal: optional sign, digits, optional
    /// fractional part. No grouping, currency or whitespace — callers
    /// normalize first with [`normalize_number_text`].
    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.strip_prefix('-').or_else(|| s.strip_prefix('+')).unwrap_or(s);
        let negative = s.starts_with('-');
        if rest.is_empty() {
            return None;
        }
        let (int_part, frac_part) = match rest.split_once('.') {
            Some((i, f)) => (i, f),
            None => (rest, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return None;
        }
        let digits = format!("{int_part}{frac_part}");
        let mut mantissa: BigInt = digits.parse().ok()?;
        if negative {
            mantissa = -mantissa;
        }
        let mut dec = ExactDecimal {
            mantissa,
            scale: frac_part.len() as u32,
        };
        dec.normalize();
        Some(dec)
    }

    fn normalize(&mut self) {
        let ten: BigInt = 10.into();
        let zero: BigInt = 0.into();
        while self.scale > 0 && (&self.mantissa % &ten) == zero {
            self.mantissa /= &ten;
            self.scale -= 1;
        }
    }
}

impl fmt::Display for ExactDecimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.mantissa);
        }
        let sign = if self.mantissa < 0.into() { "-" } else { "" };
        let digits = self.mantissa.magnitude().to_string();
        let scale = self.scale as usize;
        if digits.len() <= scale {
            write!(f, "{sign}0.{}{digits}", "0".repeat(scale - digits.len()))
        } else {
            let (int_part, frac_part) = digits.split_at(digits.len() - scale);
            write!(f, "{sign}{int_part}.{frac_part}")
        }
    }
}

/// Shared numeric normalization for completions and dataset ground truths:
/// trim whitespace, strip trailing periods, drop '$' and ','.
pub fn normalize_number_text(s: &str) -> String {
    s.trim()
        .trim_end_matches('.')
        .chars()
        .filter(|&c| c != '$' && c != ',')
        .collect()
}

/// Normalize-then-parse; the one numeric gate every grading path goes
/// through.
pub fn parse_decimal(s: &str) -> Option<ExactDecimal> {
    ExactDecimal::parse(&normalize_number_text(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerSource {
    Marker,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedAnswer {
    /// The substring the value was read from.
    pub raw: String,
    pub value: ExactDecimal,
    pub source: AnswerSource,
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\$?\d[\d,]*(?:\.\d+)?").expect("valid regex"))
}

/// Extracts the final answer from a completion.
///
/// If the literal marker occurs, the text after its LAST occurrence must
/// parse as a signed decimal after normalization (source = Marker). Strict:
/// trailing words ("460 dollars") fail the marker route. Otherwise the last
/// decimal number appearing anywhere is taken (source = Fallback). Returns
/// `None` when no number exists at all — a value, not an error.
pub fn extract_answer(completion: &str) -> Option<ExtractedAnswer> {
    if let Some(idx) = completion.rfind(ANSWER_MARKER) {
        let after = &completion[idx + ANSWER_MARKER.len()..];
        if let Some(value) = ExactDecimal::parse(&normalize_number_text(after)) {
            return Some(ExtractedAnswer {
                raw: after.to_string(),
                value,
                source: AnswerSource::Marker,
            });
        }
    }
    let m = number_regex().find_iter(completion).last()?;
    let value = ExactDecimal::parse(&normalize_number_text(m.as_str()))?;
    Some(ExtractedAnswer {
        raw: m.as_str().to_string(),
        value,
        source: AnswerSource::Fallback,
    })
}

/// True iff the completion earns the format reward: the case-sensitive
/// marker followed by a cleanly parseable number.
pub fn check_format(completion: &str) -> bool {
    matches!(
        extract_answer(completion),
        Some(ExtractedAnswer {
            source: AnswerSource::Marker,
            ..
        })
    )
}

/// (correctness, format, total) for one completion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RewardBreakdown {
    pub correctness: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn new(correct: bool, format: bool) -> Self {
        let correctness = if correct { 1.0 } else { 0.0 };
        let format = if format { 0.5 } else { 0.0 };
        RewardBreakdown {
            correctness,
            format,
            total: correctness + format,
        }
    }
}

/// Grades a completion against a ground-truth number: correctness 1 when the
/// extracted value equals the ground truth exactly (after normalization),
/// format 0.5 when the marker route succeeded, total the sum in [0, 1.5].
pub fn compute_reward(completion: &str, ground_truth: &str) -> Result<RewardBreakdown> {
    let truth = parse_decimal(ground_truth).ok_or_else(|| {
        Error::data(format!(
            "ground truth {ground_truth:?} does not parse as a decimal number"
        ))
    })?;
    let extracted = extract_answer(completion);
    let correct = extracted
        .as_ref()
        .map(|e| e.value == truth)
        .unwrap_or(false);
    let format = matches!(
        extracted,
        Some(ExtractedAnswer {
            source: AnswerSource::Marker,
            ..
        })
    );
    Ok(RewardBreakdown::new(correct, format))
}
