//! Group-relative policy optimization.
//!
//! Rollouts are collected in groups of `G` trajectories per query under a
//! frozen snapshot of the policy. Rewards are (optionally) shaped, turned into
//! group-relative advantages, and the policy is updated for several epochs on
//! a clipped importance-weighted surrogate with an exact per-context KL
//! penalty toward a reference (SFT) policy.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_token_gradients, for_each_step, sample_trajectory, softmax_in_place,
    trajectory_entropy, EntropyAggregation, PolicyParameters, Token, Trajectory,
};
use crate::sft::{sft_loss, Demonstration};
use crate::shaping::{quadrant_counts, shape_rewards, QuadrantCounts, ShapingConfig};

/// Advantages below this group standard deviation are zeroed.
pub const DEGENERATE_STD: f64 = 1e-8;
/// Importance ratios are clamped to `[RATIO_FLOOR, RATIO_CEIL]`.
pub const RATIO_FLOOR: f64 = 1e-6;
pub const RATIO_CEIL: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `A_i = r_i - mean(r)`
    MeanOnly,
    /// `A_i = (r_i - mean(r)) / std(r)`, population std
    MeanStd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// One ratio per token, averaged over the response length.
    TokenLevel,
    /// One ratio per trajectory, over the whole response likelihood.
    SequenceLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub advantage_mode: AdvantageMode,
    pub ratio_mode: RatioMode,
    pub update_epochs: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Queries sampled per main step.
    pub batch_queries: usize,
    /// Trajectories per gradient step in the update phase.
    pub minibatch_size: usize,
    pub max_response_len: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coefficient: 0.01,
            advantage_mode: AdvantageMode::MeanStd,
            ratio_mode: RatioMode::TokenLevel,
            update_epochs: 1,
            learning_rate: 0.1,
            steps: 200,
            batch_queries: 8,
            minibatch_size: 64,
            max_response_len: 16,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return fail("kl_coefficient must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_queries == 0 || self.minibatch_size == 0 || self.max_response_len == 0 {
            return fail("batch_queries, minibatch_size and max_response_len must be positive");
        }
        Ok(())
    }
}

/// `G` trajectories for one query with their rewards and advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub query_tokens: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
    pub raw_rewards: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-token log-probabilities under the rollout-time policy.
    pub old_token_logprobs: Vec<Vec<f64>>,
    /// Supervising target for the combined RL + SFT objective.
    pub supervision: Option<Vec<Token>>,
}

impl RolloutGroup {
    /// Group whose old log-probabilities are the ones recorded at sampling time.
    pub fn new(query_tokens: Vec<Token>, trajectories: Vec<Trajectory>) -> Self {
        let old = trajectories.iter().map(|t| t.token_logprobs.clone()).collect();
        Self {
            query_tokens,
            trajectories,
            raw_rewards: Vec::new(),
            shaped_rewards: Vec::new(),
            advantages: Vec::new(),
            old_token_logprobs: old,
            supervision: None,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Recomputes the old log-probabilities under `params_old`.
    pub fn record_old_logprobs(&mut self, params_old: &PolicyParameters) -> Result<()> {
        self.old_token_logprobs = self
            .trajectories
            .iter()
            .map(|t| crate::policy::token_logprobs(params_old, &self.query_tokens, &t.response_tokens))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Fills `advantages` from `shaped_rewards` (or raw rewards when unshaped).
    pub fn compute_advantages(&mut self, mode: AdvantageMode) -> Result<()> {
        let rewards = if self.shaped_rewards.is_empty() {
            &self.raw_rewards
        } else {
            &self.shaped_rewards
        };
        self.advantages = group_advantages(rewards, mode)?;
        Ok(())
    }
}

pub fn group_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered = rewards.iter().map(|r| r - mean);
    Ok(match mode {
        AdvantageMode::MeanOnly => centered.collect(),
        AdvantageMode::MeanStd => {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std < DEGENERATE_STD {
                vec![0.0; rewards.len()]
            } else {
                centered.map(|a| a / std).collect()
            }
        }
    })
}

/// `exp(new - old)`, clamped to `[1e-6, 1e6]`.
pub fn importance_ratio(new_logprob: f64, old_logprob: f64) -> f64 {
    (new_logprob - old_logprob).exp().clamp(RATIO_FLOOR, RATIO_CEIL)
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Surrogate value and its derivative with respect to the log-ratio.
fn surrogate_with_slope(log_ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let raw = log_ratio.exp();
    let ratio = raw.clamp(RATIO_FLOOR, RATIO_CEIL);
    let clamped = ratio != raw;
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, if clamped { 0.0 } else { unclipped })
    } else {
        (clipped, 0.0)
    }
}

/// One trajectory as seen by the update phase.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample<'a> {
    pub query: &'a [Token],
    pub response: &'a [Token],
    pub old_logprobs: &'a [f64],
    pub advantage: f64,
    pub supervision: Option<&'a [Token]>,
}

pub fn samples_from_groups(groups: &[RolloutGroup]) -> Result<Vec<PolicySample<'_>>> {
    let mut samples = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        if g.old_token_logprobs.len() != g.trajectories.len() {
            return Err(Error::MissingOldLogprobs(gi));
        }
        if g.advantages.len() != g.trajectories.len() {
            return Err(Error::InvalidArgument(format!(
                "group {gi} has {} advantages for {} trajectories",
                g.advantages.len(),
                g.trajectories.len()
            )));
        }
        for ((t, old), &a) in g.trajectories.iter().zip(&g.old_token_logprobs).zip(&g.advantages) {
            if old.len() != t.response_tokens.len() {
                return Err(Error::MissingOldLogprobs(gi));
            }
            samples.push(PolicySample {
                query: &g.query_tokens,
                response: &t.response_tokens,
                old_logprobs: old,
                advantage: a,
                supervision: g.supervision.as_deref(),
            });
        }
    }
    Ok(samples)
}

/// Clipped-surrogate loss plus `beta * mean KL(pi || pi_ref)` over groups.
///
/// Old log-probabilities come from each group (recorded under the rollout
/// policy). Returns the loss and its exact gradient.
pub fn grpo_loss(
    params: &PolicyParameters,
    params_ref: &PolicyParameters,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
) -> Result<(f64, PolicyParameters)> {
    let samples = samples_from_groups(groups)?;
    grpo_loss_samples(params, params_ref, &samples, config)
}

pub fn grpo_loss_samples(
    params: &PolicyParameters,
    params_ref: &PolicyParameters,
    samples: &[PolicySample<'_>],
    config: &GrpoConfig,
) -> Result<(f64, PolicyParameters)> {
    params.check_same_shape(params_ref)?;
    let mut grad = params.zeros_like();
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let per_sample = 1.0 / samples.len() as f64;
    let eps = config.clip_epsilon;
    let mut surrogate = 0.0;

    for s in samples {
        if s.response.is_empty() {
            return Err(Error::Empty("trajectory response"));
        }
        let new = crate::policy::token_logprobs(params, s.query, s.response)?;
        match config.ratio_mode {
            RatioMode::TokenLevel => {
                let per_token = per_sample / s.response.len() as f64;
                let slopes: Vec<f64> = new
                    .iter()
                    .zip(s.old_logprobs)
                    .map(|(n, o)| {
                        let (value, slope) = surrogate_with_slope(n - o, s.advantage, eps);
                        surrogate += per_token * value;
                        slope
                    })
                    .collect();
                accumulate_token_gradients(params, s.query, s.response, |t| -per_token * slopes[t], &mut grad)?;
            }
            RatioMode::SequenceLevel => {
                let log_ratio: f64 = new.iter().sum::<f64>() - s.old_logprobs.iter().sum::<f64>();
                let (value, slope) = surrogate_with_slope(log_ratio, s.advantage, eps);
                surrogate += per_sample * value;
                accumulate_token_gradients(params, s.query, s.response, |_| -per_sample * slope, &mut grad)?;
            }
        }
    }

    let mut loss = -surrogate;
    if config.kl_coefficient > 0.0 {
        let total_tokens: usize = samples.iter().map(|s| s.response.len()).sum();
        let scale = config.kl_coefficient / total_tokens as f64;
        let mut kl_sum = 0.0;
        for s in samples {
            kl_sum += accumulate_kl(params, params_ref, s.query, s.response, scale, &mut grad)?;
        }
        loss += scale * kl_sum;
    }
    Ok((loss, grad))
}

/// Sum over steps of `KL(pi(.|ctx) || pi_ref(.|ctx))`; adds `scale` times its
/// gradient into `grad`.
fn accumulate_kl(
    params: &PolicyParameters,
    params_ref: &PolicyParameters,
    query: &[Token],
    response: &[Token],
    scale: f64,
    grad: &mut PolicyParameters,
) -> Result<f64> {
    let v = params.vocab_size();
    let mut ref_probs = vec![0.0; v];
    let mut dlogits = vec![0.0; v];
    let mut total = 0.0;
    for_each_step(params, query, response, |s| {
        params_ref.logits_for_context(s.context, &mut ref_probs);
        softmax_in_place(&mut ref_probs);
        let log_ratio: Vec<f64> = s
            .probs
            .iter()
            .zip(&ref_probs)
            .map(|(p, q)| if *p > 0.0 { p.ln() - q.ln() } else { 0.0 })
            .collect();
        let kl: f64 = s.probs.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
        total += kl;
        for k in 0..v {
            dlogits[k] = scale * s.probs[k] * (log_ratio[k] - kl);
        }
        grad.add_logit_gradient(s.context, &dlogits);
    })?;
    Ok(total)
}

/// Weighted RL + SFT objective: `alpha * grpo + beta_sft * sft`.
///
/// The SFT term is the mean NLL of the supervising targets attached to the
/// samples (one per sample that carries one).
pub fn combined_objective(
    params: &PolicyParameters,
    params_ref: &PolicyParameters,
    samples: &[PolicySample<'_>],
    config: &GrpoConfig,
    alpha: f64,
    beta_sft: f64,
) -> Result<(f64, PolicyParameters)> {
    if alpha < 0.0 || beta_sft < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    if alpha > 0.0 {
        let (l, g) = grpo_loss_samples(params, params_ref, samples, config)?;
        loss += alpha * l;
        grad.add_scaled(&g, alpha)?;
    }
    if beta_sft > 0.0 {
        let demos: Vec<Demonstration> = samples
            .iter()
            .filter_map(|s| {
                s.supervision.map(|t| Demonstration {
                    query_tokens: s.query.to_vec(),
                    target_tokens: t.to_vec(),
                })
            })
            .collect();
        if !demos.is_empty() {
            let (l, g) = sft_loss(params, &demos)?;
            loss += beta_sft * l;
            grad.add_scaled(&g, beta_sft)?;
        }
    }
    Ok((loss, grad))
}

/// Weights `(alpha, beta_sft)` of the combined objective for one minibatch.
pub trait LossSchedule: Sync {
    fn weights(&self, step: usize, minibatch_rewards: &[f64]) -> (f64, f64);
}

/// Constant weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantSchedule {
    pub alpha: f64,
    pub beta_sft: f64,
}

impl LossSchedule for ConstantSchedule {
    fn weights(&self, _step: usize, _rewards: &[f64]) -> (f64, f64) {
        (self.alpha, self.beta_sft)
    }
}

/// One training query; `supervision` is its supervising target, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct GrpoItem {
    pub query: Vec<Token>,
    pub supervision: Option<Vec<Token>>,
}

/// Scores the trajectories of one group.
pub trait RewardSource {
    fn rewards(
        &mut self,
        item: usize,
        query: &[Token],
        trajectories: &[Trajectory],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>>;

    /// Ground-truth diagnostic for one trajectory, if the source has one.
    fn quality(&self, _item: usize, _trajectory: &Trajectory) -> Option<f64> {
        None
    }
}

impl<F> RewardSource for F
where
    F: FnMut(usize, &[Token], &[Trajectory], &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    fn rewards(
        &mut self,
        item: usize,
        query: &[Token],
        trajectories: &[Trajectory],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        self(item, query, trajectories, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_response_length: f64,
    pub mean_trajectory_entropy: f64,
    pub quadrant_counts: QuadrantCounts,
    pub mean_oracle_quality: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    let with_quality = rows.iter().any(|r| r.mean_oracle_quality.is_some());
    write!(
        out,
        "step,mean_reward,mean_response_length,mean_trajectory_entropy,quadrant_counts"
    )?;
    if with_quality {
        write!(out, ",mean_oracle_quality")?;
    }
    writeln!(out)?;
    for r in rows {
        let [a, b, c, d] = r.quadrant_counts;
        write!(
            out,
            "{},{},{},{},{a};{b};{c};{d}",
            r.step, r.mean_reward, r.mean_response_length, r.mean_trajectory_entropy
        )?;
        if with_quality {
            match r.mean_oracle_quality {
                Some(q) => write!(out, ",{q}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub shaping: Option<ShapingConfig>,
    /// Adds the SFT term on supervising targets when set.
    pub schedule: Option<&'a dyn LossSchedule>,
    pub entropy_aggregation: EntropyAggregation,
}

#[derive(Clone, Debug)]
pub struct GrpoRun {
    pub params: PolicyParameters,
    pub metrics: Vec<MetricsRow>,
}

/// Rollouts for one step: `G` trajectories per query under `params`, each on
/// its own rng stream seeded from `rng`, merged in index order.
pub fn collect_rollouts(
    params: &PolicyParameters,
    items: &[GrpoItem],
    indices: &[usize],
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RolloutGroup>> {
    let seeds: Vec<u64> = (0..indices.len() * config.group_size).map(|_| rng.gen()).collect();
    let trajectories: Vec<Trajectory> = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| {
            let item = &items[indices[k / config.group_size]];
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            sample_trajectory(params, &item.query, config.max_response_len, &mut stream)
        })
        .collect::<Result<_>>()?;
    let mut trajectories = trajectories.into_iter();
    Ok(indices
        .iter()
        .map(|&i| {
            let mut g = RolloutGroup::new(
                items[i].query.clone(),
                trajectories.by_ref().take(config.group_size).collect(),
            );
            g.supervision = items[i].supervision.clone();
            g
        })
        .collect())
}

/// The main loop: `steps` iterations of rollout, scoring, shaping,
/// advantage estimation and `update_epochs` passes of minibatch SGD.
#[allow(clippy::too_many_arguments)]
pub fn run_grpo<S: RewardSource + ?Sized>(
    params_init: &PolicyParameters,
    params_ref: &PolicyParameters,
    items: &[GrpoItem],
    reward: &mut S,
    config: &GrpoConfig,
    options: &RunOptions<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<GrpoRun> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("GRPO dataset"));
    }
    let mut params = params_init.clone();
    let mut metrics = Vec::with_capacity(config.steps);
    let batch = config.batch_queries.min(items.len());

    for step in 0..config.steps {
        // pi_old is the current parameters, frozen for the whole step
        let indices: Vec<usize> = rand::seq::index::sample(rng, items.len(), batch).into_vec();
        let mut groups = collect_rollouts(&params, items, &indices, config, rng)?;

        let mut quality_sum = 0.0;
        let mut quality_n = 0usize;
        for (g, &item) in groups.iter_mut().zip(&indices) {
            let r = reward.rewards(item, &g.query_tokens, &g.trajectories, rng)?;
            if r.len() != g.len() {
                return Err(Error::InvalidArgument(format!(
                    "reward source returned {} rewards for {} trajectories",
                    r.len(),
                    g.len()
                )));
            }
            if let Some(&bad) = r.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
                return Err(Error::RewardOutOfRange {
                    reward: bad,
                    query: item,
                });
            }
            for t in &g.trajectories {
                if let Some(q) = reward.quality(item, t) {
                    quality_sum += q;
                    quality_n += 1;
                }
            }
            g.raw_rewards = r;
        }

        let counts = match &options.shaping {
            Some(shaping) if shaping.enabled => shape_rewards(&mut groups, shaping)?,
            _ => {
                for g in &mut groups {
                    g.shaped_rewards = g.raw_rewards.clone();
                }
                quadrant_counts(&groups, options.entropy_aggregation).unwrap_or([0; 4])
            }
        };
        for g in &mut groups {
            g.compute_advantages(config.advantage_mode)?;
        }

        let n_traj: usize = groups.iter().map(RolloutGroup::len).sum();
        let mut entropy_sum = 0.0;
        let mut len_sum = 0usize;
        for t in groups.iter().flat_map(|g| &g.trajectories) {
            entropy_sum += trajectory_entropy(t, options.entropy_aggregation)?;
            len_sum += t.len();
        }
        metrics.push(MetricsRow {
            step: step + 1,
            mean_reward: groups.iter().flat_map(|g| &g.raw_rewards).sum::<f64>() / n_traj as f64,
            mean_response_length: len_sum as f64 / n_traj as f64,
            mean_trajectory_entropy: entropy_sum / n_traj as f64,
            quadrant_counts: counts,
            mean_oracle_quality: (quality_n > 0).then(|| quality_sum / quality_n as f64),
        });

        let samples = samples_from_groups(&groups)?;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.raw_rewards.iter().copied()).collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut mb = Vec::with_capacity(config.minibatch_size);
        let mut mb_rewards = Vec::with_capacity(config.minibatch_size);
        for _ in 0..config.update_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(config.minibatch_size) {
                mb.clear();
                mb.extend(chunk.iter().map(|&i| samples[i]));
                let (loss, grad) = match options.schedule {
                    Some(schedule) => {
                        mb_rewards.clear();
                        mb_rewards.extend(chunk.iter().map(|&i| rewards[i]));
                        let (alpha, beta_sft) = schedule.weights(step, &mb_rewards);
                        combined_objective(&params, params_ref, &mb, config, alpha, beta_sft)?
                    }
                    None => grpo_loss_samples(&params, params_ref, &mb, config)?,
                };
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::NonFinite(format!("GRPO loss {loss} at step {}", step + 1)));
                }
                params.add_scaled(&grad, -config.learning_rate)?;
            }
        }
    }
    Ok(GrpoRun { params, metrics })
}
