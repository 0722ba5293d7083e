//! Generative reward model.
//!
//! The judge is an m-gram policy over a judging vocabulary. Its query is the
//! flattened story context, the two candidates in presentation order, a
//! query-end marker, and a three-token comparison digest (one token per
//! oracle criterion, quantized into five levels from "first much better" to
//! "second much better"). Its output is
//!
//! ```text
//! [assessment] SEP [verdict] EOS
//! ```
//!
//! where the assessment is a graded overall judgment (strongly or weakly
//! favouring one presented slot) and `verdict` names the preferred slot.
//! A short-window m-gram model cannot attend to candidate tokens far back in
//! the query, so the digest is what carries candidate content into its
//! window: with a window of three, the assessment step sees exactly the three
//! digest tokens, each at its own position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{
    run_grpo, AdvantageMode, GrpoConfig, GrpoItem, GrpoRun, RatioMode, RewardSource, RunOptions,
};
use crate::policy::{greedy_trajectory, PolicyParameters, Token, Trajectory, Vocabulary};
use crate::preference::{
    canonical_verdict, presented_slot, Order, Preference, PreferenceRecord, QualityOracle, RawVerdict,
    StoryContext,
};
use crate::sft::{train_sft, Demonstration, SftConfig, SftOutcome};
use crate::shaping::ShapingConfig;
use crate::stream_rng;

pub const LEVELS: usize = 5;
pub const MIN_JUDGING_VOCAB: usize = 16;

/// Token roles in the judging vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JudgingTokens {
    pub vocab: Vocabulary,
    pub query_end: Token,
    /// First of `LEVELS` digest tokens.
    pub digest_base: Token,
    /// First of `LEVELS` assessment tokens.
    pub note_base: Token,
    pub first: Token,
    pub second: Token,
}

impl JudgingTokens {
    pub fn new(vocab: Vocabulary) -> Result<Self> {
        if vocab.size() < MIN_JUDGING_VOCAB {
            return Err(Error::InvalidVocabulary(format!(
                "judging vocabulary needs at least {MIN_JUDGING_VOCAB} tokens, got {}",
                vocab.size()
            )));
        }
        if vocab.bos() > 2 || vocab.eos() > 2 || vocab.sep() > 2 {
            return Err(Error::InvalidVocabulary(
                "judging layout expects reserved ids in 0..3".into(),
            ));
        }
        Ok(Self {
            vocab,
            query_end: 3,
            digest_base: 4,
            note_base: 4 + LEVELS,
            first: 4 + 2 * LEVELS,
            second: 5 + 2 * LEVELS,
        })
    }

    pub fn verdict_token(&self, raw: RawVerdict) -> Token {
        match raw {
            RawVerdict::First => self.first,
            RawVerdict::Second => self.second,
        }
    }

    pub fn raw_verdict(&self, token: Token) -> Option<RawVerdict> {
        if token == self.first {
            Some(RawVerdict::First)
        } else if token == self.second {
            Some(RawVerdict::Second)
        } else {
            None
        }
    }
}

/// Per-criterion comparison level, from the first presented candidate's view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    StrongFirst,
    WeakFirst,
    Even,
    WeakSecond,
    StrongSecond,
}

impl Level {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn mirrored(self) -> Self {
        match self {
            Level::StrongFirst => Level::StrongSecond,
            Level::WeakFirst => Level::WeakSecond,
            Level::Even => Level::Even,
            Level::WeakSecond => Level::WeakFirst,
            Level::StrongSecond => Level::StrongFirst,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigestThresholds {
    /// Differences with magnitude at most this are `Even`.
    pub even: f64,
    /// Differences with magnitude at least this are `Strong*`.
    pub strong: f64,
}

impl Default for DigestThresholds {
    fn default() -> Self {
        Self {
            even: 1e-9,
            strong: 0.5,
        }
    }
}

impl DigestThresholds {
    pub fn level(&self, diff: f64) -> Level {
        let mag = diff.abs();
        if mag <= self.even {
            Level::Even
        } else if diff > 0.0 {
            if mag >= self.strong {
                Level::StrongFirst
            } else {
                Level::WeakFirst
            }
        } else if mag >= self.strong {
            Level::StrongSecond
        } else {
            Level::WeakSecond
        }
    }
}

/// Parsed judge output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JudgmentOutput {
    pub reasoning_tokens: Vec<Token>,
    pub verdict: JudgedVerdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JudgedVerdict {
    Preferred(Preference),
    Malformed,
}

impl JudgedVerdict {
    pub fn preference(self) -> Option<Preference> {
        match self {
            JudgedVerdict::Preferred(p) => Some(p),
            JudgedVerdict::Malformed => None,
        }
    }
}

/// Verdict is the token right after the first SEP, canonicalized for
/// `order`. Missing SEP, a non-verdict token there, or reasoning longer than
/// `reasoning_cap` is `Malformed`.
pub fn parse_judgment(
    response: &[Token],
    order: Order,
    tokens: &JudgingTokens,
    reasoning_cap: usize,
) -> JudgmentOutput {
    let sep = tokens.vocab.sep();
    let Some(pos) = response.iter().position(|&t| t == sep) else {
        return JudgmentOutput {
            reasoning_tokens: response.to_vec(),
            verdict: JudgedVerdict::Malformed,
        };
    };
    let verdict = match response.get(pos + 1).and_then(|&t| tokens.raw_verdict(t)) {
        Some(raw) if pos <= reasoning_cap => JudgedVerdict::Preferred(canonical_verdict(order, raw)),
        _ => JudgedVerdict::Malformed,
    };
    JudgmentOutput {
        reasoning_tokens: response[..pos].to_vec(),
        verdict,
    }
}

/// `+1` when the canonical verdict equals the label, `-1` otherwise
/// (malformed output included).
pub fn verdict_reward(output: &JudgmentOutput, label: Preference) -> f64 {
    match output.verdict {
        JudgedVerdict::Preferred(p) if p == label => 1.0,
        _ => -1.0,
    }
}

/// Flattens records into judging queries and builds teacher demonstrations.
#[derive(Clone, Debug)]
pub struct JudgeEncoder {
    pub tokens: JudgingTokens,
    pub oracle: QualityOracle,
    pub thresholds: DigestThresholds,
    pub max_query_len: usize,
}

impl JudgeEncoder {
    pub fn levels(&self, context: &StoryContext, first: &[Token], second: &[Token]) -> [Level; 3] {
        let a = self.oracle.contributions(first, context);
        let b = self.oracle.contributions(second, context);
        [0, 1, 2].map(|k| self.thresholds.level(a[k] - b[k]))
    }

    /// `context ++ SEP ++ first ++ SEP ++ second ++ QUERY_END ++ digest`.
    pub fn encode_pair(
        &self,
        context: &StoryContext,
        first: &[Token],
        second: &[Token],
    ) -> Result<Vec<Token>> {
        let sep = self.tokens.vocab.sep();
        let mut q = context.tokens();
        q.push(sep);
        q.extend_from_slice(first);
        q.push(sep);
        q.extend_from_slice(second);
        q.push(self.tokens.query_end);
        q.extend(
            self.levels(context, first, second)
                .iter()
                .map(|l| self.tokens.digest_base + l.index()),
        );
        if q.len() > self.max_query_len {
            return Err(Error::InvalidArgument(format!(
                "judging query of {} tokens exceeds the maximum of {}",
                q.len(),
                self.max_query_len
            )));
        }
        self.tokens.vocab.check_all(&q)?;
        Ok(q)
    }

    pub fn encode(&self, record: &PreferenceRecord, order: Order) -> Result<Vec<Token>> {
        let (first, second) = record.presented(order);
        self.encode_pair(&record.context, first, second)
    }

    /// Template trace over oracle sub-scores: one assessment token whose
    /// direction is `preferred` and whose strength is the total score margin
    /// measured against the strong threshold.
    pub fn teacher_reasoning(
        &self,
        context: &StoryContext,
        first: &[Token],
        second: &[Token],
        preferred: RawVerdict,
    ) -> Vec<Token> {
        let margin = (self.oracle.score(first, context) - self.oracle.score(second, context)).abs();
        let strong = margin >= self.thresholds.strong;
        let level = match (preferred, strong) {
            (RawVerdict::First, true) => Level::StrongFirst,
            (RawVerdict::First, false) => Level::WeakFirst,
            (RawVerdict::Second, false) => Level::WeakSecond,
            (RawVerdict::Second, true) => Level::StrongSecond,
        };
        vec![self.tokens.note_base + level.index()]
    }

    /// Demonstration for the record's label in one presentation order.
    pub fn demonstration(&self, record: &PreferenceRecord, order: Order) -> Result<Demonstration> {
        let (first, second) = record.presented(order);
        let slot = presented_slot(order, record.canonical_label);
        let mut target = self.teacher_reasoning(&record.context, first, second, slot);
        target.extend([
            self.tokens.vocab.sep(),
            self.tokens.verdict_token(slot),
            self.tokens.vocab.eos(),
        ]);
        Demonstration::new(self.encode(record, order)?, target)
    }
}

/// Anything that can issue a canonical verdict on a record in a given order.
pub trait VerdictModel {
    fn verdict(&self, record: &PreferenceRecord, order: Order, rng: &mut ChaCha8Rng) -> Result<JudgedVerdict>;
}

/// A judge backed by policy parameters, decoded greedily.
#[derive(Clone, Debug)]
pub struct GenrmJudge<'a> {
    pub params: &'a PolicyParameters,
    pub encoder: &'a JudgeEncoder,
    pub reasoning_cap: usize,
}

impl GenrmJudge<'_> {
    pub fn max_response_len(&self) -> usize {
        self.reasoning_cap + 3
    }

    pub fn judge_pair(
        &self,
        context: &StoryContext,
        first: &[Token],
        second: &[Token],
    ) -> Result<JudgmentOutput> {
        let query = self.encoder.encode_pair(context, first, second)?;
        let traj = greedy_trajectory(self.params, &query, self.max_response_len())?;
        Ok(parse_judgment(
            &traj.response_tokens,
            Order::Orig,
            &self.encoder.tokens,
            self.reasoning_cap,
        ))
    }
}

impl VerdictModel for GenrmJudge<'_> {
    fn verdict(&self, record: &PreferenceRecord, order: Order, _rng: &mut ChaCha8Rng) -> Result<JudgedVerdict> {
        let query = self.encoder.encode(record, order)?;
        let traj = greedy_trajectory(self.params, &query, self.max_response_len())?;
        Ok(parse_judgment(&traj.response_tokens, order, &self.encoder.tokens, self.reasoning_cap).verdict)
    }
}

/// Baselines that need no parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceJudge {
    /// Ground-truth ordering.
    Oracle(QualityOracle),
    /// Fair coin per judgment: the chance-level model.
    Coin,
    /// Always picks the first-presented story: maximal position bias.
    AlwaysFirst,
}

impl VerdictModel for ReferenceJudge {
    fn verdict(&self, record: &PreferenceRecord, order: Order, rng: &mut ChaCha8Rng) -> Result<JudgedVerdict> {
        let p = match self {
            ReferenceJudge::Oracle(o) => o.prefer(&record.context, &record.s1, &record.s2),
            ReferenceJudge::Coin => {
                if rng.gen::<bool>() {
                    Preference::S1Better
                } else {
                    Preference::S2Better
                }
            }
            ReferenceJudge::AlwaysFirst => canonical_verdict(order, RawVerdict::First),
        };
        Ok(JudgedVerdict::Preferred(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub orig_accuracy: f64,
    pub swap_accuracy: f64,
    pub malformed_rate: f64,
    pub trials: usize,
}

/// Judges every record in both orders; accuracy = correct / (2 N).
pub fn evaluate_accuracy<M: VerdictModel + ?Sized>(
    model: &M,
    records: &[PreferenceRecord],
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = [0usize; 2];
    let mut malformed = 0usize;
    for r in records {
        for (k, order) in Order::BOTH.into_iter().enumerate() {
            match model.verdict(r, order, rng)? {
                JudgedVerdict::Preferred(p) => correct[k] += usize::from(p == r.canonical_label),
                JudgedVerdict::Malformed => malformed += 1,
            }
        }
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        accuracy: (correct[0] + correct[1]) as f64 / (2.0 * n),
        orig_accuracy: correct[0] as f64 / n,
        swap_accuracy: correct[1] as f64 / n,
        malformed_rate: malformed as f64 / (2.0 * n),
        trials: 2 * records.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenrmConfig {
    pub window: usize,
    /// Uniform initialization half-width; `0` starts from all-zero parameters.
    #[serde(default)]
    pub init_scale: f64,
    pub reasoning_cap: usize,
    pub max_query_len: usize,
    #[serde(default)]
    pub thresholds: DigestThresholds,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub shaping: ShapingConfig,
}

impl Default for GenrmConfig {
    fn default() -> Self {
        Self {
            window: 3,
            init_scale: 0.0,
            reasoning_cap: 32,
            max_query_len: 64,
            thresholds: DigestThresholds::default(),
            sft: SftConfig {
                epochs: 1,
                batch_size: 32,
                learning_rate: 0.5,
                momentum: 0.0,
            },
            grpo: GrpoConfig {
                group_size: 8,
                clip_epsilon: 0.2,
                kl_coefficient: 0.05,
                advantage_mode: AdvantageMode::MeanOnly,
                ratio_mode: RatioMode::SequenceLevel,
                update_epochs: 1,
                learning_rate: 0.1,
                steps: 400,
                batch_queries: 16,
                minibatch_size: 128,
                max_response_len: 35,
            },
            shaping: ShapingConfig::default(),
        }
    }
}

impl GenrmConfig {
    pub fn validate(&self) -> Result<()> {
        self.sft.validate()?;
        self.grpo.validate()?;
        self.shaping.weights.validate()?;
        if self.window == 0 {
            return Err(Error::Config("genrm.window must be positive".into()));
        }
        if self.grpo.max_response_len < self.reasoning_cap + 3 {
            return Err(Error::Config(
                "genrm.grpo.max_response_len must cover reasoning_cap + 3".into(),
            ));
        }
        Ok(())
    }
}

/// Binary verdict reward for GRPO items built from records in a fixed order.
pub struct VerdictReward<'a> {
    pub tokens: &'a JudgingTokens,
    pub reasoning_cap: usize,
    /// `(label, order)` per GRPO item.
    pub targets: Vec<(Preference, Order)>,
}

impl RewardSource for VerdictReward<'_> {
    fn rewards(
        &mut self,
        item: usize,
        _query: &[Token],
        trajectories: &[Trajectory],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let (label, order) = self.targets[item];
        Ok(trajectories
            .iter()
            .map(|t| {
                let out = parse_judgment(&t.response_tokens, order, self.tokens, self.reasoning_cap);
                verdict_reward(&out, label)
            })
            .collect())
    }
}

/// Both-order demonstrations for every record.
pub fn sft_demonstrations(encoder: &JudgeEncoder, records: &[PreferenceRecord]) -> Result<Vec<Demonstration>> {
    let mut out = Vec::with_capacity(2 * records.len());
    for r in records {
        for order in Order::BOTH {
            out.push(encoder.demonstration(r, order)?);
        }
    }
    Ok(out)
}

pub fn initial_params(vocab: Vocabulary, config: &GenrmConfig, rng: &mut ChaCha8Rng) -> Result<PolicyParameters> {
    if config.init_scale > 0.0 {
        PolicyParameters::random(vocab, config.window, config.init_scale, rng)
    } else {
        PolicyParameters::zeros(vocab, config.window)
    }
}

pub fn train_genrm_sft(
    init: &PolicyParameters,
    encoder: &JudgeEncoder,
    d_sft: &[PreferenceRecord],
    config: &GenrmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SftOutcome> {
    if d_sft.is_empty() {
        return Err(Error::Empty("SFT dataset"));
    }
    let demos = sft_demonstrations(encoder, d_sft)?;
    train_sft(init, &demos, &config.sft, rng)
}

/// GRPO from the SFT checkpoint with verdict rewards; KL is taken against the
/// SFT checkpoint.
pub fn train_genrm_grpo(
    sft_params: &PolicyParameters,
    encoder: &JudgeEncoder,
    d_rl: &[PreferenceRecord],
    config: &GenrmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GrpoRun> {
    if d_rl.is_empty() {
        return Err(Error::Empty("RL dataset"));
    }
    let mut items = Vec::with_capacity(2 * d_rl.len());
    let mut targets = Vec::with_capacity(2 * d_rl.len());
    for r in d_rl {
        for order in Order::BOTH {
            items.push(GrpoItem {
                query: encoder.encode(r, order)?,
                supervision: None,
            });
            targets.push((r.canonical_label, order));
        }
    }
    let mut reward = VerdictReward {
        tokens: &encoder.tokens,
        reasoning_cap: config.reasoning_cap,
        targets,
    };
    let options = RunOptions {
        shaping: Some(config.shaping.clone()),
        schedule: None,
        entropy_aggregation: config.shaping.aggregation,
    };
    run_grpo(sft_params, sft_params, &items, &mut reward, &config.grpo, &options, rng)
}

#[derive(Clone, Debug)]
pub struct GenrmTraining {
    pub sft: SftOutcome,
    pub grpo: GrpoRun,
}

/// SFT on `d_sft`, then GRPO on `d_rl`. Sub-stages draw from independent
/// streams derived from `seed`.
pub fn train_genrm(
    encoder: &JudgeEncoder,
    d_sft: &[PreferenceRecord],
    d_rl: &[PreferenceRecord],
    config: &GenrmConfig,
    seed: u64,
) -> Result<GenrmTraining> {
    config.validate()?;
    let mut init_rng = stream_rng(seed, 0);
    let init = initial_params(encoder.tokens.vocab, config, &mut init_rng)?;
    let sft = train_genrm_sft(&init, encoder, d_sft, config, &mut stream_rng(seed, 1))?;
    let grpo = train_genrm_grpo(&sft.params, encoder, d_rl, config, &mut stream_rng(seed, 2))?;
    Ok(GenrmTraining { sft, grpo })
}
