//! Reward computation: per-group Dice statistics, the stability-aware
//! objective, composite episode rewards and group-relative advantages.
//!
//! All statistics are population statistics (divide by N); reports that want
//! the sample variant recompute it explicitly.

use crate::perturb::RephrasingGroup;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard deviation below which a reward group is treated as constant.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

/// Maximum attainable population standard deviation of values in [0, 1];
/// realized by the two-point {0, 1} distribution and used to scale the
/// stability term into [0, 1].
pub const MAX_STD_UNIT_INTERVAL: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("empty group has no statistics")]
    EmptyGroup,
    #[error("{name} term {value} outside [0, 1]")]
    TermOutOfRange { name: &'static str, value: f64 },
    #[error("reward weights must be non-negative with a positive sum, got ({0}, {1}, {2})")]
    BadWeights(f64, f64, f64),
    #[error("lambda must be non-negative, got {0}")]
    BadLambda(f64),
}

/// Composite-reward weights, normalized to sum to 1 at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_dice: f64,
    pub w_stab: f64,
    pub w_fmt: f64,
}

impl RewardWeights {
    pub fn new(w_dice: f64, w_stab: f64, w_fmt: f64) -> Result<Self, RewardError> {
        let sum = w_dice + w_stab + w_fmt;
        if !(w_dice >= 0.0 && w_stab >= 0.0 && w_fmt >= 0.0) || sum <= 0.0 || !sum.is_finite() {
            return Err(RewardError::BadWeights(w_dice, w_stab, w_fmt));
        }
        Ok(Self {
            w_dice: w_dice / sum,
            w_stab: w_stab / sum,
            w_fmt: w_fmt / sum,
        })
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights::new(0.7, 0.2, 0.1).expect("default weights are valid")
    }
}

/// One episode's reward terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub dice_term: f64,
    pub stability_term: f64,
    pub format_term: f64,
    pub composite: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        Self {
            dice_term: 0.0,
            stability_term: 0.0,
            format_term: 0.0,
            composite: 0.0,
        }
    }
}

/// Population statistics of a group's Dice scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub mean: f64,
    pub population_std: f64,
    pub worst: f64,
}

/// A scored rephrasing group: the group itself plus per-variant Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvaluation {
    pub group: RephrasingGroup,
    pub dices: Vec<f64>,
    pub mean: f64,
    pub population_std: f64,
    pub worst: f64,
}

impl GroupEvaluation {
    pub fn new(group: RephrasingGroup, dices: Vec<f64>) -> Result<Self, RewardError> {
        let metrics = group_metrics(&dices)?;
        Ok(Self {
            group,
            dices,
            mean: metrics.mean,
            population_std: metrics.population_std,
            worst: metrics.worst,
        })
    }
}

/// Mean, population standard deviation and minimum of a non-empty list.
pub fn group_metrics(dices: &[f64]) -> Result<GroupMetrics, RewardError> {
    if dices.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let n = dices.len() as f64;
    let mean = dices.iter().sum::<f64>() / n;
    let variance = dices.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let worst = dices.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GroupMetrics {
        mean,
        population_std: variance.sqrt(),
        worst,
    })
}

/// Stability of a group of Dice scores in [0, 1]:
/// `1 - min(1, population_std / 0.5)`.
pub fn stability_term(dices: &[f64]) -> Result<f64, RewardError> {
    let metrics = group_metrics(dices)?;
    Ok(1.0 - (metrics.population_std / MAX_STD_UNIT_INTERVAL).min(1.0))
}

/// Weighted composite of the three reward terms; errors on terms
/// outside [0, 1].
pub fn composite_reward(
    dice: f64,
    stability: f64,
    format: f64,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    for (name, value) in [("dice", dice), ("stability", stability), ("format", format)] {
        if !(0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(RewardError::TermOutOfRange { name, value });
        }
    }
    // The clamp removes the ~2e-16 overshoot from normalized weights while
    // staying inside the 1e-12 weighted-sum tolerance.
    let composite = (weights.w_dice * dice + weights.w_stab * stability + weights.w_fmt * format)
        .clamp(0.0, 1.0);
    Ok(RewardBreakdown {
        dice_term: dice,
        stability_term: stability,
        format_term: format,
        composite,
    })
}

/// The stability-aware objective: mean over groups of
/// `mean(dices) - lambda * population_variance(dices)`.
pub fn objective(groups: &[GroupEvaluation], lambda: f64) -> Result<f64, RewardError> {
    if groups.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(RewardError::BadLambda(lambda));
    }
    let total: f64 = groups
        .iter()
        .map(|g| g.mean - lambda * g.population_std * g.population_std)
        .sum();
    Ok(total / groups.len() as f64)
}

/// Group-relative advantages: `(r_i - mean) / population_std`, all zeros
/// when the group is (numerically) constant.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return vec![];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = variance.sqrt();
    if std < ADVANTAGE_STD_FLOOR {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}
