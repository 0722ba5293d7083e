//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rlcs_core::grpo::{importance_ratio, AdvantageMode, GrpoConfig, RatioMode, RolloutGroup};
use rlcs_core::policy::{token_logprobs, PolicyParameters, Token, Trajectory, Vocabulary};
use rlcs_core::sft::Demonstration;
use rlcs_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

/// Central differences of `f` in every coordinate of `params`.
pub fn fd_gradient(params: &PolicyParameters, f: impl Fn(&PolicyParameters) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let x = params.values()[i];
            p.values_mut()[i] = x + FD_STEP;
            let up = f(&p);
            p.values_mut()[i] = x - FD_STEP;
            let down = f(&p);
            p.values_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Vocabulary of 4..=8 tokens, window 1..=3, weights uniform in [-1, 1].
pub fn random_params(rng: &mut ChaCha8Rng) -> PolicyParameters {
    let vocab = Vocabulary::new(rng.gen_range(4..=8)).unwrap();
    PolicyParameters::random(vocab, rng.gen_range(1..=3), 1.0, rng).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn random_query(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Token> {
    let len = rng.gen_range(0..=6);
    random_tokens(rng, vocab, len)
}

/// Response of 1..=12 tokens.
pub fn random_response(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Token> {
    let len = rng.gen_range(1..=12);
    random_tokens(rng, vocab, len)
}

pub fn random_demos(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Demonstration> {
    (0..rng.gen_range(1..=4))
        .map(|_| Demonstration::new(random_query(rng, vocab), random_response(rng, vocab)).unwrap())
        .collect()
}

pub fn random_grpo_config(rng: &mut ChaCha8Rng, ratio_mode: RatioMode) -> GrpoConfig {
    GrpoConfig {
        clip_epsilon: 0.2,
        kl_coefficient: rng.gen_range(0.05..0.5),
        advantage_mode: AdvantageMode::MeanStd,
        ratio_mode,
        ..GrpoConfig::default()
    }
}

/// Groups whose old log-probabilities are the current ones perturbed by
/// noise, so ratios land on both sides of the clip range. Instances with a
/// ratio within `1e-3` of a clip edge are redrawn: the surrogate has a kink
/// there and central differences straddling it are meaningless.
pub fn random_groups(
    rng: &mut ChaCha8Rng,
    params: &PolicyParameters,
    config: &GrpoConfig,
    with_supervision: bool,
) -> Vec<RolloutGroup> {
    let v = params.vocab_size();
    loop {
        let groups: Vec<RolloutGroup> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let query = random_query(rng, v);
                let trajectories: Vec<Trajectory> = (0..rng.gen_range(2..=4))
                    .map(|_| {
                        let response = random_response(rng, v);
                        let lp = token_logprobs(params, &query, &response).unwrap();
                        let old = lp.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
                        Trajectory {
                            query_tokens: query.clone(),
                            token_entropies: vec![0.0; response.len()],
                            response_tokens: response,
                            token_logprobs: old,
                        }
                    })
                    .collect();
                let mut g = RolloutGroup::new(query.clone(), trajectories);
                g.advantages = (0..g.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                if with_supervision {
                    g.supervision = Some(random_response(rng, v));
                }
                g
            })
            .collect();
        if !near_kink(params, &groups, config) {
            return groups;
        }
    }
}

fn near_kink(params: &PolicyParameters, groups: &[RolloutGroup], config: &GrpoConfig) -> bool {
    let eps = config.clip_epsilon;
    let close = |r: f64| (r - (1.0 - eps)).abs() < 1e-3 || (r - (1.0 + eps)).abs() < 1e-3;
    groups.iter().any(|g| {
        g.trajectories.iter().zip(&g.old_token_logprobs).any(|(t, old)| {
            let new = token_logprobs(params, &g.query_tokens, &t.response_tokens).unwrap();
            match config.ratio_mode {
                RatioMode::TokenLevel => new.iter().zip(old).any(|(n, o)| close(importance_ratio(*n, *o))),
                RatioMode::SequenceLevel => close(importance_ratio(new.iter().sum(), old.iter().sum())),
            }
        })
    })
}

/// Checks an analytic `(value, gradient)` function against central
/// differences of its value; returns the relative error.
pub fn check_gradient(
    params: &PolicyParameters,
    f: impl Fn(&PolicyParameters) -> Result<(f64, PolicyParameters)>,
) -> f64 {
    let (_, grad) = f(params).unwrap();
    let fd = fd_gradient(params, |p| f(p).unwrap().0);
    relative_error(grad.values(), &fd)
}
