//! Process-reward arithmetic for the listener's RL stage: dynamic-sampling
//! filter, group-normalised advantages, the asymmetrically clipped surrogate,
//! and the judge prompt/response protocol. No training machinery.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{render_op, MemOp};

/// Group size used when sampling candidate operation lists.
pub const DEFAULT_GROUP_SIZE: usize = 8;
/// Standard deviations at or below this are treated as zero.
pub const STD_TOLERANCE: f64 = 1e-9;

const JUDGE_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");
const GT_SLOT: &str = "{gt_ops}";
const PRED_SLOT: &str = "{pred_ops}";
/// Indentation of the op-list slots in the judge template.
const SLOT_INDENT: &str = "  ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("reward {index} = {value} is outside [-1, 1]")]
    RewardOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} equivalence flags, got {got}")]
    FlagCount { expected: usize, got: usize },
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("degenerate group: reward std {std} is within tolerance")]
    DegenerateGroup { std: f64 },
    #[error("invalid clip range: need 0 < eps_low <= eps_high < 1, got {low}, {high}")]
    InvalidClip { low: f64, high: f64 },
    #[error("no score object in judge output")]
    NoScore,
}

/// Keep a group only if some, but not all, samples match the reference.
pub fn dynamic_sample_keep(flags: &[bool]) -> bool {
    let hits = flags.iter().filter(|f| **f).count();
    hits > 0 && hits < flags.len()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `(R_i − mean) / std` with population std.
pub fn normalize_rewards(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    let std = population_std(rewards);
    if std.is_nan() || std <= STD_TOLERANCE {
        return Err(RlError::DegenerateGroup { std });
    }
    let m = mean(rewards);
    Ok(rewards.iter().map(|r| (r - m) / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    rewards: Vec<f64>,
    flags: Vec<bool>,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>, flags: Vec<bool>) -> Result<Self, RlError> {
        if rewards.len() < 2 {
            return Err(RlError::GroupTooSmall(rewards.len()));
        }
        if flags.len() != rewards.len() {
            return Err(RlError::FlagCount {
                expected: rewards.len(),
                got: flags.len(),
            });
        }
        if let Some((index, &value)) = rewards
            .iter()
            .enumerate()
            .find(|(_, r)| !(-1.0..=1.0).contains(*r))
        {
            return Err(RlError::RewardOutOfRange { index, value });
        }
        Ok(Self { rewards, flags })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn keep(&self) -> bool {
        dynamic_sample_keep(&self.flags)
    }

    pub fn advantages(&self) -> Result<Vec<f64>, RlError> {
        normalize_rewards(&self.rewards)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipParams {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, RlError> {
        if !(eps_low > 0.0 && eps_low <= eps_high && eps_high < 1.0) {
            return Err(RlError::InvalidClip {
                low: eps_low,
                high: eps_high,
            });
        }
        Ok(Self { eps_low, eps_high })
    }
}

/// `min(r·A, clamp(r, 1−eps_low, 1+eps_high)·A)`.
pub fn dapo_term(ratio: f64, advantage: f64, clip: ClipParams) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Token-level mean over a group: every token of every sample weighs the
/// same, so longer samples contribute proportionally more. Returns 0 for a
/// group with no tokens.
pub fn token_level_mean(per_sample_terms: &[Vec<f64>]) -> f64 {
    let tokens: usize = per_sample_terms.iter().map(Vec::len).sum();
    if tokens == 0 {
        return 0.0;
    }
    per_sample_terms.iter().flatten().sum::<f64>() / tokens as f64
}

fn indent_lines(ops: &[MemOp]) -> String {
    ops.iter()
        .map(render_op)
        .collect::<Vec<_>>()
        .join(&format!("\n{SLOT_INDENT}"))
}

/// Fills the judge template: ground truth first, then prediction, one op per
/// line at the slot's indentation.
pub fn build_judge_prompt(gt_ops: &[MemOp], pred_ops: &[MemOp]) -> String {
    let template = JUDGE_TEMPLATE.strip_suffix('\n').unwrap_or(JUDGE_TEMPLATE);
    let (head, rest) = template
        .split_once(GT_SLOT)
        .expect("template has a GT slot");
    let (middle, tail) = rest
        .split_once(PRED_SLOT)
        .expect("template has a Pred slot");
    let mut out = String::with_capacity(template.len() + 64 * (gt_ops.len() + pred_ops.len()));
    out.push_str(head);
    out.push_str(&indent_lines(gt_ops));
    out.push_str(middle);
    out.push_str(&indent_lines(pred_ops));
    out.push_str(tail);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    /// Within [-1, 1].
    pub score: f64,
    /// Set when the judge's raw value was out of range.
    pub clamped: bool,
    pub raw: f64,
}

/// First flat `{...}` object in `text` carrying a numeric `score`.
pub fn parse_judge_score(text: &str) -> Result<JudgeScore, RlError> {
    for (start, _) in text.match_indices('{') {
        let Some(len) = text[start..].find('}') else {
            break;
        };
        let candidate = &text[start..=start + len];
        let Ok(serde_json::Value::Object(obj)) = serde_json::from_str(candidate) else {
            continue;
        };
        let Some(raw) = obj.get("score").and_then(serde_json::Value::as_f64) else {
            continue;
        };
        let score = raw.clamp(-1.0, 1.0);
        let clamped = score != raw;
        if clamped {
            log::warn!("judge score {raw} clamped to {score}");
        }
        return Ok(JudgeScore {
            score,
            clamped,
            raw,
        });
    }
    Err(RlError::NoScore)
}
