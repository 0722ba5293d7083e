//! Entropy-based reward shaping.
//!
//! Each trajectory is placed in one of four cells by comparing its
//! trajectory-level entropy against the batch median (low entropy means high
//! confidence) and by the sign of its binary reward. The reward is then
//! multiplied by the weight of that cell. `H == median` counts as high
//! confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::RolloutGroup;
use crate::policy::{trajectory_entropy, EntropyAggregation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingWeights {
    pub low_conf_incorrect: f64,
    pub high_conf_incorrect: f64,
    pub low_conf_correct: f64,
    pub high_conf_correct: f64,
}

impl Default for ShapingWeights {
    fn default() -> Self {
        Self {
            low_conf_incorrect: 1.0,
            high_conf_incorrect: 1.5,
            low_conf_correct: 1.5,
            high_conf_correct: 0.5,
        }
    }
}

impl ShapingWeights {
    /// Every cell weighted 1.0; shaping becomes the identity.
    pub fn uniform() -> Self {
        Self {
            low_conf_incorrect: 1.0,
            high_conf_incorrect: 1.0,
            low_conf_correct: 1.0,
            high_conf_correct: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.low_conf_incorrect,
            self.high_conf_incorrect,
            self.low_conf_correct,
            self.high_conf_correct,
        ];
        if all.iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("shaping weights must be positive".into()))
        }
    }

    pub fn weight(&self, quadrant: Quadrant) -> f64 {
        match quadrant {
            Quadrant::LowConfIncorrect => self.low_conf_incorrect,
            Quadrant::HighConfIncorrect => self.high_conf_incorrect,
            Quadrant::LowConfCorrect => self.low_conf_correct,
            Quadrant::HighConfCorrect => self.high_conf_correct,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quadrant {
    LowConfIncorrect,
    HighConfIncorrect,
    LowConfCorrect,
    HighConfCorrect,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::LowConfIncorrect,
        Quadrant::HighConfIncorrect,
        Quadrant::LowConfCorrect,
        Quadrant::HighConfCorrect,
    ];

    pub fn index(self) -> usize {
        match self {
            Quadrant::LowConfIncorrect => 0,
            Quadrant::HighConfIncorrect => 1,
            Quadrant::LowConfCorrect => 2,
            Quadrant::HighConfCorrect => 3,
        }
    }
}

/// Counts per quadrant, in [`Quadrant::ALL`] order.
pub type QuadrantCounts = [usize; 4];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// One median over every trajectory in the batch, across groups.
    #[default]
    Batch,
    /// One median per rollout group.
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    pub enabled: bool,
    #[serde(default)]
    pub weights: ShapingWeights,
    #[serde(default)]
    pub aggregation: EntropyAggregation,
    #[serde(default)]
    pub scope: ThresholdScope,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weights: ShapingWeights::default(),
            aggregation: EntropyAggregation::Mean,
            scope: ThresholdScope::Batch,
        }
    }
}

/// Median; even counts average the two middle order statistics.
pub fn batch_median_threshold(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::Empty("entropy batch"));
    }
    if entropies.iter().any(|h| h.is_nan()) {
        return Err(Error::NonFinite("NaN entropy".into()));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

pub fn classify(entropy: f64, threshold: f64, reward: f64) -> Result<Quadrant> {
    let high_confidence = entropy <= threshold;
    if reward == 1.0 {
        Ok(if high_confidence {
            Quadrant::HighConfCorrect
        } else {
            Quadrant::LowConfCorrect
        })
    } else if reward == -1.0 {
        Ok(if high_confidence {
            Quadrant::HighConfIncorrect
        } else {
            Quadrant::LowConfIncorrect
        })
    } else {
        Err(Error::InvalidArgument(format!(
            "shaping needs binary rewards in {{-1, +1}}, got {reward}"
        )))
    }
}

pub fn shaping_weight(
    entropy: f64,
    threshold: f64,
    reward: f64,
    weights: &ShapingWeights,
) -> Result<f64> {
    Ok(weights.weight(classify(entropy, threshold, reward)?))
}

/// Writes `shaped_rewards = w * raw_rewards` for every group and returns the
/// quadrant counts. Raw rewards are left untouched.
pub fn shape_rewards(groups: &mut [RolloutGroup], config: &ShapingConfig) -> Result<QuadrantCounts> {
    config.weights.validate()?;
    let entropies: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            g.trajectories
                .iter()
                .map(|t| trajectory_entropy(t, config.aggregation))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let batch_threshold = match config.scope {
        ThresholdScope::Batch => {
            let flat: Vec<f64> = entropies.iter().flatten().copied().collect();
            Some(batch_median_threshold(&flat)?)
        }
        ThresholdScope::Group => None,
    };

    let mut counts = [0; 4];
    for (group, hs) in groups.iter_mut().zip(&entropies) {
        let threshold = match batch_threshold {
            Some(t) => t,
            None => batch_median_threshold(hs)?,
        };
        let mut shaped = Vec::with_capacity(hs.len());
        for (&h, &r) in hs.iter().zip(&group.raw_rewards) {
            let q = classify(h, threshold, r)?;
            counts[q.index()] += 1;
            shaped.push(config.weights.weight(q) * r);
        }
        group.shaped_rewards = shaped;
    }
    Ok(counts)
}

/// Quadrant counts without modifying rewards; `None` when rewards are not binary.
pub fn quadrant_counts(
    groups: &[RolloutGroup],
    aggregation: EntropyAggregation,
) -> Option<QuadrantCounts> {
    let mut entropies = Vec::new();
    for g in groups {
        for t in &g.trajectories {
            entropies.push(trajectory_entropy(t, aggregation).ok()?);
        }
    }
    let threshold = batch_median_threshold(&entropies).ok()?;
    let mut counts = [0; 4];
    let rewards = groups.iter().flat_map(|g| g.raw_rewards.iter());
    for (&h, &r) in entropies.iter().zip(rewards) {
        counts[classify(h, threshold, r).ok()?.index()] += 1;
    }
    Some(counts)
}
