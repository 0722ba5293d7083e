//! Preference data construction.
//!
//! Story contexts and candidate pairs are generated synthetically and scored
//! by a rule-based [`QualityOracle`]. Simulated judges (standing in for human
//! annotators and teacher models) judge every pair in both presentation
//! orders; verdicts are canonicalized back to the stored `(s1, s2)` order and
//! logged on the record so the filters can be re-run offline.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    S1Better,
    S2Better,
}

impl Preference {
    pub fn flipped(self) -> Self {
        match self {
            Preference::S1Better => Preference::S2Better,
            Preference::S2Better => Preference::S1Better,
        }
    }
}

/// Presentation order: `Orig` shows `(s1, s2)`, `Swap` shows `(s2, s1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Orig,
    Swap,
}

impl Order {
    pub const BOTH: [Order; 2] = [Order::Orig, Order::Swap];
}

/// Which presented slot a judge preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawVerdict {
    First,
    Second,
}

pub fn canonical_verdict(order: Order, raw: RawVerdict) -> Preference {
    match (order, raw) {
        (Order::Orig, RawVerdict::First) | (Order::Swap, RawVerdict::Second) => Preference::S1Better,
        (Order::Orig, RawVerdict::Second) | (Order::Swap, RawVerdict::First) => Preference::S2Better,
    }
}

/// Inverse of [`canonical_verdict`]: the slot that holds the preferred story.
pub fn presented_slot(order: Order, preference: Preference) -> RawVerdict {
    match (order, preference) {
        (Order::Orig, Preference::S1Better) | (Order::Swap, Preference::S2Better) => RawVerdict::First,
        _ => RawVerdict::Second,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    HumanSim,
    SyntheticConsensus,
    /// Held-out records labeled by the oracle ordering.
    OracleEval,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoryContext {
    pub profile: Vec<Token>,
    pub history: Vec<Token>,
    pub outline: Vec<Token>,
}

impl StoryContext {
    /// `profile ++ history ++ outline`.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.profile.len() + self.history.len() + self.outline.len());
        out.extend_from_slice(&self.profile);
        out.extend_from_slice(&self.history);
        out.extend_from_slice(&self.outline);
        out
    }
}

/// Canonical verdicts of one judge in both orders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdicts {
    pub judge: String,
    pub orig: Preference,
    pub swap: Preference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: u64,
    pub context: StoryContext,
    pub s1: Vec<Token>,
    pub s2: Vec<Token>,
    pub canonical_label: Preference,
    pub source: Source,
    #[serde(default)]
    pub verdict_log: Vec<JudgeVerdicts>,
}

impl PreferenceRecord {
    pub fn presented(&self, order: Order) -> (&[Token], &[Token]) {
        match order {
            Order::Orig => (&self.s1, &self.s2),
            Order::Swap => (&self.s2, &self.s1),
        }
    }

    pub fn verdicts_of(&self, judge: &str) -> Option<&JudgeVerdicts> {
        self.verdict_log.iter().find(|v| v.judge == judge)
    }
}

/// Per-criterion oracle breakdown of one story.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubScores {
    /// Longest in-order match of the outline within the story, over `|outline|`.
    pub coverage: f64,
    pub forbidden: usize,
    /// `| |s| - L* | / L*`
    pub length_penalty: f64,
}

/// Deterministic rule-based story quality:
///
/// `q(s | c) = w1 * coverage - w2 * forbidden - w3 * length_penalty`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityOracle {
    pub weight_coverage: f64,
    pub weight_forbidden: f64,
    pub weight_length: f64,
    pub target_length: usize,
    pub forbidden: BTreeSet<Token>,
}

impl Default for QualityOracle {
    fn default() -> Self {
        Self {
            weight_coverage: 1.0,
            weight_forbidden: 0.25,
            weight_length: 0.5,
            target_length: 6,
            forbidden: [13, 14, 15].into_iter().collect(),
        }
    }
}

impl QualityOracle {
    pub fn validate(&self) -> Result<()> {
        if self.target_length == 0 {
            return Err(Error::Config("oracle.target_length must be positive".into()));
        }
        let w = [self.weight_coverage, self.weight_forbidden, self.weight_length];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("oracle weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sub_scores(&self, story: &[Token], context: &StoryContext) -> SubScores {
        let outline = &context.outline;
        let coverage = if outline.is_empty() {
            0.0
        } else {
            longest_common_subsequence(outline, story) as f64 / outline.len() as f64
        };
        let target = self.target_length as f64;
        SubScores {
            coverage,
            forbidden: story.iter().filter(|t| self.forbidden.contains(t)).count(),
            length_penalty: (story.len() as f64 - target).abs() / target,
        }
    }

    /// Weighted per-criterion contributions `(coverage, -forbidden, -length)`.
    pub fn contributions(&self, story: &[Token], context: &StoryContext) -> [f64; 3] {
        let s = self.sub_scores(story, context);
        [
            self.weight_coverage * s.coverage,
            -self.weight_forbidden * s.forbidden as f64,
            -self.weight_length * s.length_penalty,
        ]
    }

    pub fn score(&self, story: &[Token], context: &StoryContext) -> f64 {
        self.contributions(story, context).iter().sum()
    }

    /// Oracle ordering of a pair.
    pub fn prefer(&self, context: &StoryContext, s1: &[Token], s2: &[Token]) -> Preference {
        if self.score(s1, context) > self.score(s2, context) {
            Preference::S1Better
        } else {
            Preference::S2Better
        }
    }
}

pub fn longest_common_subsequence(a: &[Token], b: &[Token]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// A judge that, with probability `position_bias`, prefers whatever is shown
/// first; otherwise reports the true ordering with probability `accuracy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedJudge {
    pub name: String,
    pub accuracy: f64,
    pub position_bias: f64,
    /// Salt for this judge's random stream.
    pub stream: u64,
}

impl SimulatedJudge {
    pub fn new(name: impl Into<String>, accuracy: f64, position_bias: f64, stream: u64) -> Result<Self> {
        let judge = Self {
            name: name.into(),
            accuracy,
            position_bias,
            stream,
        };
        judge.validate()?;
        Ok(judge)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) || !(0.0..=1.0).contains(&self.position_bias) {
            return Err(Error::Config(format!(
                "judge {}: accuracy and position_bias must lie in [0, 1]",
                self.name
            )));
        }
        Ok(())
    }

    /// Independent, reproducible stream for this judge on one record.
    pub fn stream_for(&self, seed: u64, record_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(record_id);
        rng
    }

    /// One presentation. Always consumes exactly two uniforms so that runs
    /// with different accuracies share their randomness.
    pub fn judge_presented<R: Rng + ?Sized>(&self, first_is_better: bool, rng: &mut R) -> RawVerdict {
        let u_bias: f64 = rng.gen();
        let u_acc: f64 = rng.gen();
        if u_bias < self.position_bias {
            return RawVerdict::First;
        }
        let correct = u_acc < self.accuracy;
        if first_is_better == correct {
            RawVerdict::First
        } else {
            RawVerdict::Second
        }
    }
}

/// Canonical verdicts for `(Orig, Swap)` with independent draws per order.
pub fn judge_both_orders<R: Rng + ?Sized>(
    judge: &SimulatedJudge,
    record: &PreferenceRecord,
    oracle: &QualityOracle,
    rng: &mut R,
) -> (Preference, Preference) {
    let truth = oracle.prefer(&record.context, &record.s1, &record.s2);
    let orig = judge.judge_presented(truth == Preference::S1Better, rng);
    let swap = judge.judge_presented(truth == Preference::S2Better, rng);
    (
        canonical_verdict(Order::Orig, orig),
        canonical_verdict(Order::Swap, swap),
    )
}

/// Appends each judge's both-order verdicts to every record's log.
pub fn annotate(
    records: &mut [PreferenceRecord],
    judges: &[SimulatedJudge],
    oracle: &QualityOracle,
    seed: u64,
) {
    for record in records.iter_mut() {
        for judge in judges {
            let mut rng = judge.stream_for(seed, record.id);
            let (orig, swap) = judge_both_orders(judge, record, oracle, &mut rng);
            record.verdict_log.push(JudgeVerdicts {
                judge: judge.name.clone(),
                orig,
                swap,
            });
        }
    }
}

/// Relabels records with a single-order (original) judgment of `annotator`.
pub fn label_with(
    records: &mut [PreferenceRecord],
    annotator: &SimulatedJudge,
    oracle: &QualityOracle,
    seed: u64,
    source: Source,
) {
    for record in records.iter_mut() {
        let mut rng = annotator.stream_for(seed, record.id);
        let truth = oracle.prefer(&record.context, &record.s1, &record.s2);
        let raw = annotator.judge_presented(truth == Preference::S1Better, &mut rng);
        record.canonical_label = canonical_verdict(Order::Orig, raw);
        record.source = source;
    }
}

/// Keeps records whose `teacher` verdicts agree across orders and with the label.
pub fn sft_consistency_filter(records: &[PreferenceRecord], teacher: &str) -> Vec<PreferenceRecord> {
    records
        .iter()
        .filter(|r| {
            r.verdicts_of(teacher)
                .is_some_and(|v| v.orig == v.swap && v.orig == r.canonical_label)
        })
        .cloned()
        .collect()
}

/// Keeps records on which all `judges` agree in both orders, relabeled with
/// the agreed verdict.
pub fn consensus_filter(records: &[PreferenceRecord], judges: &[&str]) -> Result<Vec<PreferenceRecord>> {
    if judges.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "consensus needs at least 2 judges, got {}",
            judges.len()
        )));
    }
    let mut kept = Vec::new();
    'records: for r in records {
        let mut agreed: Option<Preference> = None;
        for name in judges {
            let Some(v) = r.verdicts_of(name) else {
                continue 'records;
            };
            for p in [v.orig, v.swap] {
                match agreed {
                    None => agreed = Some(p),
                    Some(a) if a != p => continue 'records,
                    Some(_) => {}
                }
            }
        }
        if let Some(label) = agreed {
            let mut r = r.clone();
            r.canonical_label = label;
            r.source = Source::SyntheticConsensus;
            kept.push(r);
        }
    }
    Ok(kept)
}

/// `D_RL_human = D_human \ D_SFT`, `D_RL = D_RL_human ∪ D_RL_syn`.
/// Returns `(D_RL_human, D_RL)`.
pub fn split_datasets(
    d_human: &[PreferenceRecord],
    d_sft: &[PreferenceRecord],
    d_rl_syn: &[PreferenceRecord],
) -> Result<(Vec<PreferenceRecord>, Vec<PreferenceRecord>)> {
    let human_ids: HashSet<u64> = d_human.iter().map(|r| r.id).collect();
    let sft_ids: HashSet<u64> = d_sft.iter().map(|r| r.id).collect();
    if let Some(r) = d_sft.iter().find(|r| !human_ids.contains(&r.id)) {
        return Err(Error::SetAlgebra(format!(
            "SFT record {} is not in the human set",
            r.id
        )));
    }
    let rl_human: Vec<PreferenceRecord> = d_human
        .iter()
        .filter(|r| !sft_ids.contains(&r.id))
        .cloned()
        .collect();
    let mut seen: HashSet<u64> = rl_human.iter().map(|r| r.id).collect();
    let mut rl = rl_human.clone();
    for r in d_rl_syn {
        if seen.insert(r.id) {
            rl.push(r.clone());
        }
    }
    Ok((rl_human, rl))
}

/// Shape of generated contexts and candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusShape {
    pub vocab_size: usize,
    /// First token id usable as story content; ids below are reserved.
    pub first_content_token: Token,
    pub profile_len: usize,
    pub history_len: usize,
    pub outline_len: usize,
    pub max_story_len: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            first_content_token: 3,
            profile_len: 2,
            history_len: 2,
            outline_len: 3,
            max_story_len: 12,
        }
    }
}

impl CorpusShape {
    pub fn validate(&self, oracle: &QualityOracle) -> Result<()> {
        let allowed = self.allowed_outline_tokens(oracle).len();
        if self.first_content_token >= self.vocab_size {
            return Err(Error::Config("no content tokens in vocabulary".into()));
        }
        if self.outline_len == 0 || self.outline_len > allowed {
            return Err(Error::Config(format!(
                "outline_len must lie in 1..={allowed} (non-forbidden content tokens)"
            )));
        }
        if self.max_story_len == 0 {
            return Err(Error::Config("max_story_len must be positive".into()));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> std::ops::Range<Token> {
        self.first_content_token..self.vocab_size
    }

    pub fn allowed_outline_tokens(&self, oracle: &QualityOracle) -> Vec<Token> {
        self.content_tokens()
            .filter(|t| !oracle.forbidden.contains(t))
            .collect()
    }

    pub fn random_context<R: Rng + ?Sized>(&self, oracle: &QualityOracle, rng: &mut R) -> StoryContext {
        let content = self.content_tokens();
        let mut allowed = self.allowed_outline_tokens(oracle);
        let mut outline = Vec::with_capacity(self.outline_len);
        for _ in 0..self.outline_len {
            let k = rng.gen_range(0..allowed.len());
            outline.push(allowed.swap_remove(k));
        }
        StoryContext {
            profile: (0..self.profile_len).map(|_| rng.gen_range(content.clone())).collect(),
            history: (0..self.history_len).map(|_| rng.gen_range(content.clone())).collect(),
            outline,
        }
    }

    /// A candidate continuation of random length; each slot advances through
    /// the outline with a per-story probability, otherwise draws any content
    /// token (forbidden ones included).
    pub fn random_story<R: Rng + ?Sized>(&self, context: &StoryContext, rng: &mut R) -> Vec<Token> {
        let len = rng.gen_range(1..=self.max_story_len);
        let p_outline: f64 = rng.gen_range(0.0..0.8);
        let mut next = 0;
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < p_outline {
                    let t = context.outline[next % context.outline.len()];
                    next += 1;
                    t
                } else {
                    rng.gen_range(self.content_tokens())
                }
            })
            .collect()
    }
}

/// `count` records with oracle labels; pairs with equal oracle scores are redrawn.
pub fn generate_synthetic_corpus<R: Rng + ?Sized>(
    count: usize,
    first_id: u64,
    shape: &CorpusShape,
    oracle: &QualityOracle,
    source: Source,
    rng: &mut R,
) -> Result<Vec<PreferenceRecord>> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus count must be at least 1".into()));
    }
    shape.validate(oracle)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let context = shape.random_context(oracle, rng);
        let (s1, s2) = loop {
            let a = shape.random_story(&context, rng);
            let b = shape.random_story(&context, rng);
            let gap = oracle.score(&a, &context) - oracle.score(&b, &context);
            if a != b && gap.abs() > 1e-9 {
                break (a, b);
            }
        };
        let canonical_label = oracle.prefer(&context, &s1, &s2);
        out.push(PreferenceRecord {
            id: first_id + i as u64,
            context,
            s1,
            s2,
            canonical_label,
            source,
            verdict_log: Vec::new(),
        });
    }
    Ok(out)
}
