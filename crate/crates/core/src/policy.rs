//! m-gram log-linear autoregressive categorical policy.
//!
//! Every trainable model in the pipeline (the judging model and the story
//! policy) is an instance of this family. The next-token logits for a
//! context are
//!
//! ```text
//! logit(v | context) = sum_{j=1..m} weights[j][c_j][v] + bias[v]
//! ```
//!
//! where `c_1` is the most recent token, `c_2` the one before it, and so on.
//! Contexts shorter than `m` are left-padded with BOS. Because the model is
//! linear in its parameters before the softmax, every gradient used by the
//! trainers is an exact residual `onehot - probs` routed to the active
//! feature rows.
//!
//! # Parameter file format
//!
//! Parameters persist as UTF-8 text, one record per line:
//!
//! ```text
//! rlcs-policy 1
//! vocab <V> bos <id> eos <id> sep <id>
//! window <m>
//! w <j> <c> <V space-separated reals>     (m*V lines, j = 1..m, c = 0..V-1)
//! b <V space-separated reals>
//! ```
//!
//! Reals are written in the shortest representation that parses back to the
//! same `f64`, so a save/load cycle is bit-exact.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Token = usize;

const FORMAT_MAGIC: &str = "rlcs-policy 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    bos: Token,
    eos: Token,
    sep: Token,
}

impl Vocabulary {
    pub const BOS: Token = 0;
    pub const EOS: Token = 1;
    pub const SEP: Token = 2;

    /// Vocabulary with the conventional reserved ids BOS=0, EOS=1, SEP=2.
    pub fn new(size: usize) -> Result<Self> {
        Self::with_reserved(size, Self::BOS, Self::EOS, Self::SEP)
    }

    pub fn with_reserved(size: usize, bos: Token, eos: Token, sep: Token) -> Result<Self> {
        if size < 4 {
            return Err(Error::InvalidVocabulary(format!(
                "size must be at least 4, got {size}"
            )));
        }
        if bos == eos || bos == sep || eos == sep {
            return Err(Error::InvalidVocabulary(
                "reserved ids must be distinct".into(),
            ));
        }
        if bos >= size || eos >= size || sep >= size {
            return Err(Error::InvalidVocabulary(format!(
                "reserved ids must be < {size}"
            )));
        }
        Ok(Self {
            size,
            bos,
            eos,
            sep,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> Token {
        self.bos
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn sep(&self) -> Token {
        self.sep
    }

    pub fn is_reserved(&self, token: Token) -> bool {
        token == self.bos || token == self.eos || token == self.sep
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if token < self.size {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                token,
                vocab: self.size,
            })
        }
    }

    pub fn check_all(&self, tokens: &[Token]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check(t))
    }
}

/// Weights and bias of an m-gram policy, stored flat.
///
/// Layout: `weights[j][c][v]` at `(j * V + c) * V + v` for `j` in `0..m`
/// (zero-based, `j = 0` is the most recent token), then `bias[v]` at
/// `m * V * V + v`. Gradients use the same type and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    vocab: Vocabulary,
    window: usize,
    values: Vec<f64>,
}

impl PolicyParameters {
    pub fn zeros(vocab: Vocabulary, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must be positive".into()));
        }
        let v = vocab.size();
        Ok(Self {
            vocab,
            window,
            values: vec![0.0; window * v * v + v],
        })
    }

    /// Independent uniform draws in `[-scale, scale]` for every entry.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        window: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(vocab, window)?;
        for x in &mut params.values {
            *x = rng.gen_range(-scale..=scale);
        }
        Ok(params)
    }

    pub fn from_values(vocab: Vocabulary, window: usize, values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(vocab, window)?;
        if values.len() != params.values.len() {
            return Err(Error::ShapeMismatch {
                expected: params.values.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("parameter entry {i}")));
        }
        params.values = values;
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vocab: self.vocab,
            window: self.window,
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat index of `weights[position][context_token][output]`, zero-based position.
    pub fn weight_index(&self, position: usize, context_token: Token, output: Token) -> usize {
        let v = self.vocab.size();
        (position * v + context_token) * v + output
    }

    pub fn bias_index(&self, output: Token) -> usize {
        self.window * self.vocab.size() * self.vocab.size() + output
    }

    pub fn weight(&self, position: usize, context_token: Token, output: Token) -> f64 {
        self.values[self.weight_index(position, context_token, output)]
    }

    pub fn set_weight(&mut self, position: usize, context_token: Token, output: Token, x: f64) {
        let i = self.weight_index(position, context_token, output);
        self.values[i] = x;
    }

    pub fn bias(&self, output: Token) -> f64 {
        self.values[self.bias_index(output)]
    }

    pub fn set_bias(&mut self, output: Token, x: f64) {
        let i = self.bias_index(output);
        self.values[i] = x;
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (x, g) in self.values.iter_mut().zip(&other.values) {
            *x += alpha * g;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in &mut self.values {
            *x *= alpha;
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.vocab != other.vocab || self.window != other.window {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                found: other.values.len(),
            });
        }
        Ok(())
    }

    /// Context tokens for predicting position `end` of `seq`, most recent first.
    pub(crate) fn context_into(&self, seq: &[Token], end: usize, out: &mut [Token]) {
        for (j, slot) in out.iter_mut().enumerate().take(self.window) {
            *slot = if end > j {
                seq[end - 1 - j]
            } else {
                self.vocab.bos()
            };
        }
    }

    pub(crate) fn logits_for_context(&self, context: &[Token], out: &mut [f64]) {
        let v = self.vocab.size();
        let bias_start = self.bias_index(0);
        out.copy_from_slice(&self.values[bias_start..bias_start + v]);
        for (j, &c) in context.iter().enumerate() {
            let start = self.weight_index(j, c, 0);
            for (o, w) in out.iter_mut().zip(&self.values[start..start + v]) {
                *o += w;
            }
        }
    }

    /// Adds `dlogits` (gradient with respect to the logits at one step) to
    /// the bias and to each active weight row.
    pub(crate) fn add_logit_gradient(&mut self, context: &[Token], dlogits: &[f64]) {
        let v = self.vocab.size();
        let bias_start = self.bias_index(0);
        for (g, d) in self.values[bias_start..bias_start + v].iter_mut().zip(dlogits) {
            *g += d;
        }
        for (j, &c) in context.iter().enumerate() {
            let start = self.weight_index(j, c, 0);
            for (g, d) in self.values[start..start + v].iter_mut().zip(dlogits) {
                *g += d;
            }
        }
    }

    /// Serializes to the documented text format.
    pub fn to_text(&self) -> String {
        let v = self.vocab.size();
        let mut out = String::with_capacity(self.values.len() * 12);
        let _ = writeln!(out, "{FORMAT_MAGIC}");
        let _ = writeln!(
            out,
            "vocab {} bos {} eos {} sep {}",
            v,
            self.vocab.bos(),
            self.vocab.eos(),
            self.vocab.sep()
        );
        let _ = writeln!(out, "window {}", self.window);
        for j in 0..self.window {
            for c in 0..v {
                let _ = write!(out, "w {} {}", j + 1, c);
                let start = self.weight_index(j, c, 0);
                for x in &self.values[start..start + v] {
                    let _ = write!(out, " {x}");
                }
                out.push('\n');
            }
        }
        out.push('b');
        let start = self.bias_index(0);
        for x in &self.values[start..start + v] {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "policy parameters";
        let mut lines = text.lines();
        let mut next = || lines.next().ok_or_else(|| Error::parse(ctx, "truncated file"));

        if next()? != FORMAT_MAGIC {
            return Err(Error::parse(ctx, "bad header"));
        }
        let header: Vec<&str> = next()?.split_whitespace().collect();
        let field = |name: &str| -> Result<usize> {
            let pos = header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| Error::parse(ctx, format!("missing `{name}`")))?;
            header
                .get(pos + 1)
                .ok_or_else(|| Error::parse(ctx, format!("missing value for `{name}`")))?
                .parse()
                .map_err(|e| Error::parse(ctx, e))
        };
        let vocab =
            Vocabulary::with_reserved(field("vocab")?, field("bos")?, field("eos")?, field("sep")?)?;
        let window: usize = next()?
            .strip_prefix("window ")
            .ok_or_else(|| Error::parse(ctx, "missing window"))?
            .trim()
            .parse()
            .map_err(|e| Error::parse(ctx, e))?;
        let mut params = Self::zeros(vocab, window)?;
        let v = vocab.size();

        let parse_row = |fields: &[&str]| -> Result<Vec<f64>> {
            if fields.len() != v {
                return Err(Error::parse(
                    ctx,
                    format!("expected {v} values, found {}", fields.len()),
                ));
            }
            fields
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::parse(ctx, e)))
                .collect()
        };

        for j in 0..window {
            for c in 0..v {
                let line = next()?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                let expect = [(j + 1).to_string(), c.to_string()];
                if fields.len() < 3 || fields[0] != "w" || fields[1] != expect[0] || fields[2] != expect[1] {
                    return Err(Error::parse(ctx, format!("expected weight row w {} {c}", j + 1)));
                }
                let row = parse_row(&fields[3..])?;
                let start = params.weight_index(j, c, 0);
                params.values[start..start + v].copy_from_slice(&row);
            }
        }
        let line = next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"b") {
            return Err(Error::parse(ctx, "expected bias row"));
        }
        let row = parse_row(&fields[1..])?;
        let start = params.bias_index(0);
        params.values[start..start + v].copy_from_slice(&row);
        if !params.is_finite() {
            return Err(Error::NonFinite("loaded parameters".into()));
        }
        Ok(params)
    }

    /// Hex SHA-256 of the text serialization.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in logits.iter_mut() {
        *x /= total;
    }
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Next-token distribution given the full context (query followed by any
/// generated prefix).
pub fn next_token_distribution(params: &PolicyParameters, context: &[Token]) -> Result<Vec<f64>> {
    params.vocab.check_all(context)?;
    let mut ctx = vec![0; params.window];
    params.context_into(context, context.len(), &mut ctx);
    let mut probs = vec![0.0; params.vocab_size()];
    params.logits_for_context(&ctx, &mut probs);
    softmax_in_place(&mut probs);
    Ok(probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_tokens: Vec<Token>,
    pub response_tokens: Vec<Token>,
    pub token_logprobs: Vec<f64>,
    pub token_entropies: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response_tokens.is_empty()
    }

    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyAggregation {
    #[default]
    Mean,
    Sum,
}

pub fn trajectory_entropy(traj: &Trajectory, aggregation: EntropyAggregation) -> Result<f64> {
    if traj.token_entropies.is_empty() {
        return Err(Error::Empty("trajectory response"));
    }
    let sum: f64 = traj.token_entropies.iter().sum();
    Ok(match aggregation {
        EntropyAggregation::Sum => sum,
        EntropyAggregation::Mean => sum / traj.token_entropies.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Decoding {
    Sample,
    Greedy,
}

fn decode<R: Rng + ?Sized>(
    params: &PolicyParameters,
    query: &[Token],
    max_len: usize,
    mode: Decoding,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    params.vocab.check_all(query)?;
    let v = params.vocab_size();
    let eos = params.vocab.eos();
    let mut seq = query.to_vec();
    let mut ctx = vec![0; params.window];
    let mut probs = vec![0.0; v];
    let mut traj = Trajectory {
        query_tokens: query.to_vec(),
        response_tokens: Vec::with_capacity(max_len),
        token_logprobs: Vec::with_capacity(max_len),
        token_entropies: Vec::with_capacity(max_len),
    };
    for _ in 0..max_len {
        params.context_into(&seq, seq.len(), &mut ctx);
        params.logits_for_context(&ctx, &mut probs);
        softmax_in_place(&mut probs);
        let token = match mode {
            Decoding::Greedy => argmax(&probs),
            Decoding::Sample => sample_index(&probs, rng.gen::<f64>()),
        };
        traj.response_tokens.push(token);
        traj.token_logprobs.push(probs[token].ln().min(0.0));
        traj.token_entropies.push(entropy(&probs));
        seq.push(token);
        if token == eos {
            break;
        }
    }
    Ok(traj)
}

/// First index of the maximum entry.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Ancestral sampling until EOS or `max_len` tokens.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParameters,
    query: &[Token],
    max_len: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    decode(params, query, max_len, Decoding::Sample, rng)
}

/// Greedy (argmax, lowest id on ties) decoding until EOS or `max_len` tokens.
pub fn greedy_trajectory(
    params: &PolicyParameters,
    query: &[Token],
    max_len: usize,
) -> Result<Trajectory> {
    decode(
        params,
        query,
        max_len,
        Decoding::Greedy,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )
}

/// Per-step view handed to [`for_each_step`].
pub(crate) struct Step<'a> {
    pub index: usize,
    pub context: &'a [Token],
    pub probs: &'a [f64],
    pub target: Token,
}

/// Teacher-forced walk over `response` given `query`.
pub(crate) fn for_each_step(
    params: &PolicyParameters,
    query: &[Token],
    response: &[Token],
    mut f: impl FnMut(Step<'_>),
) -> Result<()> {
    params.vocab.check_all(query)?;
    params.vocab.check_all(response)?;
    let mut seq = Vec::with_capacity(query.len() + response.len());
    seq.extend_from_slice(query);
    seq.extend_from_slice(response);
    let mut ctx = vec![0; params.window];
    let mut probs = vec![0.0; params.vocab_size()];
    for (t, &target) in response.iter().enumerate() {
        let end = query.len() + t;
        params.context_into(&seq, end, &mut ctx);
        params.logits_for_context(&ctx, &mut probs);
        softmax_in_place(&mut probs);
        f(Step {
            index: t,
            context: &ctx,
            probs: &probs,
            target,
        });
    }
    Ok(())
}

/// Per-token log-probabilities of `response` under the policy.
pub fn token_logprobs(
    params: &PolicyParameters,
    query: &[Token],
    response: &[Token],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(response.len());
    for_each_step(params, query, response, |s| out.push(s.probs[s.target].ln()))?;
    Ok(out)
}

/// `log pi(response | query)`.
pub fn sequence_logprob(params: &PolicyParameters, query: &[Token], response: &[Token]) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    Ok(token_logprobs(params, query, response)?.iter().sum())
}

/// Adds `scale * d/dtheta log pi(response | query)` into `grad`.
pub(crate) fn accumulate_logprob_gradient(
    params: &PolicyParameters,
    query: &[Token],
    response: &[Token],
    scale: f64,
    grad: &mut PolicyParameters,
) -> Result<()> {
    accumulate_token_gradients(params, query, response, |_| scale, grad)
}

/// Adds `sum_t scale(t) * d/dtheta log pi(y_t | ...)` into `grad`.
pub(crate) fn accumulate_token_gradients(
    params: &PolicyParameters,
    query: &[Token],
    response: &[Token],
    mut scale: impl FnMut(usize) -> f64,
    grad: &mut PolicyParameters,
) -> Result<()> {
    let mut residual = vec![0.0; params.vocab_size()];
    for_each_step(params, query, response, |s| {
        let a = scale(s.index);
        if a == 0.0 {
            return;
        }
        for (r, p) in residual.iter_mut().zip(s.probs) {
            *r = -a * p;
        }
        residual[s.target] += a;
        grad.add_logit_gradient(s.context, &residual);
    })
}

/// Exact gradient of [`sequence_logprob`].
pub fn logprob_gradient(
    params: &PolicyParameters,
    query: &[Token],
    response: &[Token],
) -> Result<PolicyParameters> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    let mut grad = params.zeros_like();
    accumulate_logprob_gradient(params, query, response, 1.0, &mut grad)?;
    Ok(grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroSupport {
    /// `q = 0` where `p > 0` is an error.
    #[default]
    Error,
    /// `q = 0` where `p > 0` yields `+inf`.
    Infinite,
}

/// `KL(p || q) = sum p ln(p / q)` with `0 ln(0 / q) = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    kl_categorical_with(p, q, ZeroSupport::Error)
}

pub fn kl_categorical_with(p: &[f64], q: &[f64], zero_support: ZeroSupport) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return match zero_support {
                ZeroSupport::Error => Err(Error::KlUnsupported { index: i, p: pi }),
                ZeroSupport::Infinite => Ok(f64::INFINITY),
            };
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}
