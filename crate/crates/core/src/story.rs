//! Story policy training with a frozen pairwise judge.
//!
//! Rewards come from a random pivot: one trajectory per group is the
//! reference and gets 0, every other trajectory gets +1 if the comparator
//! prefers it over the reference and -1 otherwise. The pivot's 0 takes part
//! in the group mean and standard deviation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genrm::{GenrmJudge, JudgedVerdict};
use crate::grpo::{
    combined_objective, run_grpo, samples_from_groups, AdvantageMode, ConstantSchedule, GrpoConfig,
    GrpoItem, GrpoRun, LossSchedule, RatioMode, RewardSource, RolloutGroup, RunOptions,
};
use crate::policy::{sample_trajectory, EntropyAggregation, PolicyParameters, Token, Trajectory};
use crate::preference::{CorpusShape, Preference, PreferenceRecord, QualityOracle, StoryContext};
use crate::sft::{train_sft, Demonstration, SftConfig, SftOutcome};
use crate::shaping::ShapingConfig;

/// Story policy query: the flattened context.
pub fn story_query(context: &StoryContext) -> Vec<Token> {
    context.tokens()
}

/// Story tokens of a response: everything before the first EOS.
pub fn story_tokens(response: &[Token], eos: Token) -> &[Token] {
    let end = response.iter().position(|&t| t == eos).unwrap_or(response.len());
    &response[..end]
}

/// Decides whether `candidate` beats `pivot` for `context`.
pub trait PairComparator: Sync {
    /// `S1Better` means the candidate wins; `None` is an unusable judgment.
    fn compare(&self, context: &StoryContext, candidate: &[Token], pivot: &[Token]) -> Result<Option<Preference>>;
}

/// Ground-truth ordering; ties go to the pivot.
#[derive(Clone, Debug)]
pub struct OracleComparator {
    pub oracle: QualityOracle,
}

impl PairComparator for OracleComparator {
    fn compare(&self, context: &StoryContext, candidate: &[Token], pivot: &[Token]) -> Result<Option<Preference>> {
        let better = self.oracle.score(candidate, context) > self.oracle.score(pivot, context);
        Ok(Some(if better {
            Preference::S1Better
        } else {
            Preference::S2Better
        }))
    }
}

/// The generative reward model, decoded greedily with the candidate shown
/// first. With `both_orders`, the pair is also judged swapped and the
/// candidate wins only if both canonical verdicts favour it.
#[derive(Clone, Debug)]
pub struct GenrmComparator<'a> {
    pub judge: GenrmJudge<'a>,
    pub both_orders: bool,
}

impl PairComparator for GenrmComparator<'_> {
    fn compare(&self, context: &StoryContext, candidate: &[Token], pivot: &[Token]) -> Result<Option<Preference>> {
        let orig = self.judge.judge_pair(context, candidate, pivot)?.verdict;
        if !self.both_orders {
            return Ok(orig.preference());
        }
        // swapped presentation: a First verdict there favours the pivot
        let swap = self.judge.judge_pair(context, pivot, candidate)?.verdict;
        Ok(match (orig, swap) {
            (JudgedVerdict::Malformed, _) | (_, JudgedVerdict::Malformed) => None,
            (JudgedVerdict::Preferred(a), JudgedVerdict::Preferred(b)) => {
                if a == Preference::S1Better && b == Preference::S2Better {
                    Some(Preference::S1Better)
                } else {
                    Some(Preference::S2Better)
                }
            }
        })
    }
}

/// Flips every verdict of the wrapped comparator.
#[derive(Clone, Debug)]
pub struct Negated<C>(pub C);

impl<C: PairComparator> PairComparator for Negated<C> {
    fn compare(&self, context: &StoryContext, candidate: &[Token], pivot: &[Token]) -> Result<Option<Preference>> {
        Ok(self.0.compare(context, candidate, pivot)?.map(Preference::flipped))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotAssignment {
    pub pivot_index: usize,
    /// One reward per group member; the pivot's is 0.
    pub rewards: Vec<f64>,
}

impl PivotAssignment {
    /// `(index, reward)` for every non-pivot member.
    pub fn comparisons(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rewards
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.pivot_index)
            .map(|(i, &r)| (i, r))
    }
}

/// Pivot chosen uniformly from `rng`; unusable judgments count as losses.
pub fn pivot_pointwise_rewards<C: PairComparator + ?Sized>(
    context: &StoryContext,
    stories: &[&[Token]],
    comparator: &C,
    rng: &mut ChaCha8Rng,
) -> Result<PivotAssignment> {
    if stories.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pivot rewards need at least 2 trajectories, got {}",
            stories.len()
        )));
    }
    let pivot_index = rng.gen_range(0..stories.len());
    let pivot = stories[pivot_index];
    let rewards = stories
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == pivot_index {
                return Ok(0.0);
            }
            Ok(match comparator.compare(context, s, pivot)? {
                Some(Preference::S1Better) => 1.0,
                _ => -1.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PivotAssignment { pivot_index, rewards })
}

/// One training context and its supervising trajectory (ends with EOS).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryItem {
    pub context: StoryContext,
    pub supervision: Vec<Token>,
}

/// Items from preference records: the labeled winner is the supervising
/// trajectory.
pub fn story_items(records: &[PreferenceRecord], eos: Token) -> Vec<StoryItem> {
    records
        .iter()
        .map(|r| {
            let winner = match r.canonical_label {
                Preference::S1Better => &r.s1,
                Preference::S2Better => &r.s2,
            };
            let mut supervision = winner.clone();
            supervision.push(eos);
            StoryItem {
                context: r.context.clone(),
                supervision,
            }
        })
        .collect()
}

/// A reference story for `context`: the outline in order, spread among
/// non-forbidden filler, with length drawn from `target_length ± 2` (within
/// the shape's bounds). Stands in for a written story whose outline was
/// extracted from it.
pub fn reference_story<R: Rng + ?Sized>(
    context: &StoryContext,
    shape: &CorpusShape,
    oracle: &QualityOracle,
    rng: &mut R,
) -> Vec<Token> {
    let k = context.outline.len();
    let lo = k.max(oracle.target_length.saturating_sub(2)).max(1);
    let hi = shape.max_story_len.min(oracle.target_length + 2).max(lo);
    let len = rng.gen_range(lo..=hi);
    let filler = shape.allowed_outline_tokens(oracle);
    let mut slots = rand::seq::index::sample(rng, len, k).into_vec();
    slots.sort_unstable();
    let mut story: Vec<Token> = (0..len).map(|_| filler[rng.gen_range(0..filler.len())]).collect();
    for (slot, &t) in slots.iter().zip(&context.outline) {
        story[*slot] = t;
    }
    story
}

/// `count` random contexts with reference stories as supervising targets.
pub fn generate_story_items<R: Rng + ?Sized>(
    count: usize,
    shape: &CorpusShape,
    oracle: &QualityOracle,
    eos: Token,
    rng: &mut R,
) -> Result<Vec<StoryItem>> {
    if count == 0 {
        return Err(Error::InvalidArgument("story item count must be at least 1".into()));
    }
    shape.validate(oracle)?;
    Ok((0..count)
        .map(|_| {
            let context = shape.random_context(oracle, rng);
            let mut supervision = reference_story(&context, shape, oracle, rng);
            supervision.push(eos);
            StoryItem { context, supervision }
        })
        .collect())
}

pub fn story_demonstrations(items: &[StoryItem]) -> Result<Vec<Demonstration>> {
    items
        .iter()
        .map(|it| Demonstration::new(story_query(&it.context), it.supervision.clone()))
        .collect()
}

/// Pivot rewards from a comparator, with the oracle as a diagnostic.
pub struct PivotReward<'a, C: PairComparator + ?Sized> {
    pub items: &'a [StoryItem],
    pub comparator: &'a C,
    pub oracle: &'a QualityOracle,
    pub eos: Token,
}

impl<C: PairComparator + ?Sized> RewardSource for PivotReward<'_, C> {
    fn rewards(
        &mut self,
        item: usize,
        _query: &[Token],
        trajectories: &[Trajectory],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let stories: Vec<&[Token]> = trajectories
            .iter()
            .map(|t| story_tokens(&t.response_tokens, self.eos))
            .collect();
        Ok(pivot_pointwise_rewards(&self.items[item].context, &stories, self.comparator, rng)?.rewards)
    }

    fn quality(&self, item: usize, trajectory: &Trajectory) -> Option<f64> {
        let story = story_tokens(&trajectory.response_tokens, self.eos);
        Some(self.oracle.score(story, &self.items[item].context))
    }
}

/// `alpha * grpo_loss + beta_sft * sft_loss` over the groups' supervising
/// trajectories, with its exact gradient.
pub fn combined_loss(
    params: &PolicyParameters,
    params_ref: &PolicyParameters,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    alpha: f64,
    beta_sft: f64,
) -> Result<(f64, PolicyParameters)> {
    let samples = samples_from_groups(groups)?;
    combined_objective(params, params_ref, &samples, config, alpha, beta_sft)
}

/// Which pairwise judge produces pivot rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorKind {
    /// The trained generative reward model.
    Genrm,
    /// The quality oracle itself.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryConfig {
    pub window: usize,
    pub max_story_len: usize,
    pub alpha: f64,
    pub beta_sft: f64,
    pub comparator: ComparatorKind,
    /// Judge each pair in both orders when the comparator is the reward model.
    #[serde(default)]
    pub comparator_both_orders: bool,
    /// Training contexts with reference stories.
    pub dataset_size: usize,
    /// Held-out contexts used to measure oracle quality.
    pub eval_contexts: usize,
    /// Entropy shaping assumes binary rewards; pivot rewards include 0, so
    /// enabling it is rejected unless `allow_shaping` is set.
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub allow_shaping: bool,
    /// Sampled continuations per context when measuring oracle quality.
    pub eval_samples: usize,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
}

impl Default for StoryConfig {
    fn default() -> Self {
        Self {
            window: 3,
            max_story_len: 12,
            alpha: 1.0,
            beta_sft: 0.1,
            comparator: ComparatorKind::Genrm,
            comparator_both_orders: false,
            dataset_size: 2000,
            eval_contexts: 300,
            shaping: ShapingConfig {
                enabled: false,
                ..ShapingConfig::default()
            },
            allow_shaping: false,
            eval_samples: 4,
            sft: SftConfig {
                epochs: 1,
                batch_size: 32,
                learning_rate: 0.5,
                momentum: 0.0,
            },
            grpo: GrpoConfig {
                group_size: 8,
                clip_epsilon: 0.2,
                kl_coefficient: 0.01,
                advantage_mode: AdvantageMode::MeanStd,
                ratio_mode: RatioMode::SequenceLevel,
                update_epochs: 2,
                learning_rate: 0.3,
                steps: 200,
                batch_queries: 16,
                minibatch_size: 64,
                max_response_len: 13,
            },
        }
    }
}

impl StoryConfig {
    pub fn validate(&self) -> Result<()> {
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.window == 0 {
            return Err(Error::Config("story.window must be positive".into()));
        }
        if self.grpo.group_size < 2 {
            return Err(Error::Config("story.grpo.group_size must be at least 2 for pivot rewards".into()));
        }
        if !(self.alpha >= 0.0 && self.beta_sft >= 0.0) {
            return Err(Error::Config("story.alpha and story.beta_sft must be non-negative".into()));
        }
        if self.shaping.enabled && !self.allow_shaping {
            return Err(Error::Config(
                "story.shaping.enabled needs story.allow_shaping: pivot rewards are not binary".into(),
            ));
        }
        if self.grpo.max_response_len < self.max_story_len + 1 {
            return Err(Error::Config(
                "story.grpo.max_response_len must cover max_story_len + EOS".into(),
            ));
        }
        if self.dataset_size == 0 || self.eval_contexts == 0 {
            return Err(Error::Config(
                "story.dataset_size and story.eval_contexts must be positive".into(),
            ));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("story.eval_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ConstantSchedule {
        ConstantSchedule {
            alpha: self.alpha,
            beta_sft: self.beta_sft,
        }
    }
}

pub fn train_story_sft(
    init: &PolicyParameters,
    items: &[StoryItem],
    config: &StoryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SftOutcome> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("story dataset"));
    }
    train_sft(init, &story_demonstrations(items)?, &config.sft, rng)
}

/// GRPO from the SFT policy with pivot rewards and the combined loss. The
/// comparator is only ever read; KL is taken against the SFT policy.
pub fn train_story_policy<C: PairComparator + ?Sized>(
    sft_params: &PolicyParameters,
    comparator: &C,
    items: &[StoryItem],
    oracle: &QualityOracle,
    config: &StoryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GrpoRun> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("story dataset"));
    }
    let grpo_items: Vec<GrpoItem> = items
        .iter()
        .map(|it| GrpoItem {
            query: story_query(&it.context),
            supervision: Some(it.supervision.clone()),
        })
        .collect();
    let mut reward = PivotReward {
        items,
        comparator,
        oracle,
        eos: sft_params.vocab().eos(),
    };
    let schedule = config.schedule();
    let options = RunOptions {
        shaping: config.shaping.enabled.then(|| config.shaping.clone()),
        schedule: Some(&schedule as &dyn LossSchedule),
        entropy_aggregation: EntropyAggregation::Mean,
    };
    run_grpo(sft_params, sft_params, &grpo_items, &mut reward, &config.grpo, &options, rng)
}

/// Mean oracle quality of `samples` sampled continuations per context.
pub fn mean_story_quality(
    params: &PolicyParameters,
    contexts: &[StoryContext],
    oracle: &QualityOracle,
    samples: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if contexts.is_empty() || samples == 0 {
        return Err(Error::Empty("story evaluation set"));
    }
    let eos = params.vocab().eos();
    let mut total = 0.0;
    for c in contexts {
        let q = story_query(c);
        for _ in 0..samples {
            let t = sample_trajectory(params, &q, max_len, rng)?;
            total += oracle.score(story_tokens(&t.response_tokens, eos), c);
        }
    }
    Ok(total / (contexts.len() * samples) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genrm::{DigestThresholds, JudgeEncoder, JudgingTokens};
    use crate::policy::Vocabulary;
    use crate::preference::{generate_synthetic_corpus, Source};
    use rand::SeedableRng;

    fn context() -> StoryContext {
        StoryContext {
            profile: vec![3, 4],
            history: vec![5, 6],
            outline: vec![7, 8, 9],
        }
    }

    #[test]
    fn pivot_examples() {
        let oracle = OracleComparator {
            oracle: QualityOracle::default(),
        };
        let stories: Vec<Vec<Token>> = vec![vec![7, 8, 9], vec![13], vec![7], vec![7, 8, 9, 10, 11, 12]];
        let refs: Vec<&[Token]> = stories.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = pivot_pointwise_rewards(&context(), &refs, &oracle, &mut rng).unwrap();
            assert_eq!(a.rewards.iter().filter(|&&r| r == 0.0).count(), 1);
            assert_eq!(a.rewards[a.pivot_index], 0.0);
            let q = |s: &[Token]| oracle.oracle.score(s, &context());
            for (i, r) in a.comparisons() {
                let expected = if q(refs[i]) > q(refs[a.pivot_index]) { 1.0 } else { -1.0 };
                assert_eq!(r, expected);
            }
        }
        let pair: Vec<&[Token]> = vec![&[7], &[8]];
        let a = pivot_pointwise_rewards(&context(), &pair, &oracle, &mut rng).unwrap();
        assert_eq!(a.rewards.iter().filter(|r| r.abs() == 1.0).count(), 1);
        assert!(pivot_pointwise_rewards(&context(), &pair[..1], &oracle, &mut rng).is_err());
    }

    #[test]
    fn negation_flips_non_pivot_rewards() {
        let oracle = OracleComparator {
            oracle: QualityOracle::default(),
        };
        let stories: Vec<&[Token]> = vec![&[7, 8], &[13, 14], &[7, 8, 9, 7, 8, 9], &[3]];
        let a = pivot_pointwise_rewards(&context(), &stories, &oracle, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = pivot_pointwise_rewards(&context(), &stories, &Negated(oracle), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(a.pivot_index, b.pivot_index);
        for (x, y) in a.rewards.iter().zip(&b.rewards) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn reference_stories_follow_outline() {
        let shape = CorpusShape::default();
        let oracle = QualityOracle::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items = generate_story_items(200, &shape, &oracle, 1, &mut rng).unwrap();
        for it in &items {
            assert_eq!(it.supervision.last(), Some(&1));
            let story = story_tokens(&it.supervision, 1);
            let s = oracle.sub_scores(story, &it.context);
            assert_eq!(s.coverage, 1.0);
            assert_eq!(s.forbidden, 0);
            assert!((4..=8).contains(&story.len()));
        }
    }

    #[test]
    fn story_tokens_stop_at_eos() {
        assert_eq!(story_tokens(&[5, 6, 1, 7], 1), &[5, 6]);
        assert_eq!(story_tokens(&[5, 6], 1), &[5, 6]);
        assert!(story_tokens(&[1], 1).is_empty());
    }

    #[test]
    fn shaping_rejected_by_default() {
        let mut config = StoryConfig::default();
        config.validate().unwrap();
        config.shaping.enabled = true;
        assert!(config.validate().is_err());
        config.allow_shaping = true;
        config.validate().unwrap();
    }

    #[test]
    fn combined_loss_reduces_to_components() {
        let vocab = Vocabulary::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = PolicyParameters::random(vocab, 2, 0.5, &mut rng).unwrap();
        let reference = PolicyParameters::random(vocab, 2, 0.5, &mut rng).unwrap();
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| sample_trajectory(&reference, &[3, 4], 5, &mut rng).unwrap())
            .collect();
        let mut g = RolloutGroup::new(vec![3, 4], trajs);
        g.raw_rewards = vec![1.0, 0.0, -1.0];
        g.compute_advantages(AdvantageMode::MeanStd).unwrap();
        g.supervision = Some(vec![5, 5, 1]);
        let groups = [g];
        let config = StoryConfig::default().grpo;
        let (rl, rl_grad) = crate::grpo::grpo_loss(&params, &reference, &groups, &config).unwrap();
        let (l, grad) = combined_loss(&params, &reference, &groups, &config, 1.0, 0.0).unwrap();
        assert_eq!(l, rl);
        assert_eq!(grad, rl_grad);
        let demo = Demonstration::new(vec![3, 4], vec![5, 5, 1]).unwrap();
        let (sft, sft_grad) = crate::sft::sft_loss(&params, &[demo]).unwrap();
        let (l, grad) = combined_loss(&params, &reference, &groups, &config, 0.0, 1.0).unwrap();
        assert!((l - sft).abs() < 1e-12);
        for (a, b) in grad.values().iter().zip(sft_grad.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_model_stays_frozen() {
        let shape = CorpusShape::default();
        let oracle = QualityOracle::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records =
            generate_synthetic_corpus(20, 0, &shape, &oracle, Source::HumanSim, &mut rng).unwrap();
        let vocab = Vocabulary::new(16).unwrap();
        let genrm = PolicyParameters::random(vocab, 3, 0.5, &mut rng).unwrap();
        let before = genrm.content_hash();
        let encoder = JudgeEncoder {
            tokens: JudgingTokens::new(vocab).unwrap(),
            oracle: oracle.clone(),
            thresholds: DigestThresholds::default(),
            max_query_len: 64,
        };
        let comparator = GenrmComparator {
            judge: GenrmJudge {
                params: &genrm,
                encoder: &encoder,
                reasoning_cap: 32,
            },
            both_orders: false,
        };
        let items = story_items(&records, 1);
        let mut config = StoryConfig::default();
        config.grpo.steps = 3;
        let policy = PolicyParameters::zeros(vocab, 3).unwrap();
        let run = train_story_policy(&policy, &comparator, &items, &oracle, &config, &mut rng).unwrap();
        assert_eq!(genrm.content_hash(), before);
        assert_eq!(run.metrics.len(), 3);
        assert!(run.metrics.iter().all(|m| m.mean_oracle_quality.is_some()));
    }
}
