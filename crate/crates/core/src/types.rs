//! Domain records shared by every stage.
//!
//! Field names here are the on-disk field names of the line-delimited
//! record files.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One training example: an image reference, a query about it and the gold
/// answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub id: String,
    pub image_ref: String,
    pub query: String,
    pub gold_answer: String,
    /// Reasoner model to use for this item instead of the configured one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoner_model: Option<String>,
}

impl TaskItem {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        query: impl Into<String>,
        gold_answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            query: query.into(),
            gold_answer: gold_answer.into(),
            reasoner_model: None,
        }
    }
}

/// Mean outcome reward of a caption's rollouts, kept as the exact fraction
/// `correct / total` (not reduced, so the rollout count stays visible).
///
/// Serialized as the string `"j/n"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CaptionReward {
    pub correct: u32,
    pub total: u32,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid caption reward `{0}`: expected j/n with 0 <= j <= n and n > 0")]
pub struct CaptionRewardParseError(String);

impl CaptionReward {
    /// Returns `None` when `total` is zero or `correct > total`.
    pub fn new(correct: u32, total: u32) -> Option<Self> {
        (total > 0 && correct <= total).then_some(Self { correct, total })
    }

    pub fn as_ratio(&self) -> BigRational {
        BigRational::new(BigInt::from(self.correct), BigInt::from(self.total))
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.correct) / f64::from(self.total)
    }

    /// Exact test `correct / total > alpha`, with `alpha` taken at its
    /// shortest decimal representation, so `3/5` does not exceed `0.6`.
    pub fn exceeds(&self, alpha: f64) -> bool {
        match decimal_ratio(alpha) {
            Some(threshold) => self.as_ratio() > threshold,
            None => false,
        }
    }
}

/// The value of the shortest decimal string that round-trips to `x`.
fn decimal_ratio(x: f64) -> Option<BigRational> {
    if !x.is_finite() {
        return None;
    }
    let text = format!("{x}");
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    let digits: BigInt = format!("{int_part}{frac_part}").parse().ok()?;
    let scale = num_traits::pow(BigInt::from(10), frac_part.len());
    let value = BigRational::new(digits, scale);
    Some(if negative { -value } else { value })
}

impl fmt::Display for CaptionReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.total)
    }
}

impl FromStr for CaptionReward {
    type Err = CaptionRewardParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || CaptionRewardParseError(s.to_string());
        let (j, n) = s.split_once('/').ok_or_else(err)?;
        let j = j.trim().parse().map_err(|_| err())?;
        let n = n.trim().parse().map_err(|_| err())?;
        CaptionReward::new(j, n).ok_or_else(err)
    }
}

impl Serialize for CaptionReward {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CaptionReward {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One sampled description of a task's image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub task_id: String,
    pub index: u32,
    pub text: String,
    pub reward: Option<CaptionReward>,
    pub backend_id: String,
}

/// One reasoning rollout conditioned on a caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub caption_index: u32,
    pub index: u32,
    pub text: String,
    pub extracted_answer: Option<String>,
    /// Unset until the pool is scored; then 0 or 1.
    pub outcome_reward: Option<u8>,
    pub length_tokens: u64,
    pub has_think_tag: bool,
    pub backend_id: String,
}

impl Trajectory {
    pub fn is_correct(&self) -> bool {
        self.outcome_reward == Some(1)
    }
}

/// True when `text` contains a `<think>` span marker.
pub fn has_think_tag(text: &str) -> bool {
    text.contains("<think>") || text.contains("</think>")
}

/// Which system prompt a training example is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemPromptId {
    SlowThinking,
    Default,
}

impl SystemPromptId {
    pub fn for_text(text: &str) -> Self {
        if has_think_tag(text) {
            SystemPromptId::SlowThinking
        } else {
            SystemPromptId::Default
        }
    }
}

/// An element of the off-policy dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffPolicyRecord {
    pub task_id: String,
    pub query: String,
    pub image_ref: String,
    pub caption_index: u32,
    pub trajectory: Trajectory,
    pub dataset_reward: u8,
    pub system_prompt_id: SystemPromptId,
}
