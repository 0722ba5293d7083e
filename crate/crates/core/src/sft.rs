//! Supervised fine-tuning: teacher-forced cross-entropy on demonstrations.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate_logprob_gradient, for_each_step, PolicyParameters, Token};

/// A query and the full target continuation the model should reproduce.
///
/// For the judging model the target is `reasoning ++ [SEP] ++ [verdict] ++ [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query_tokens: Vec<Token>,
    pub target_tokens: Vec<Token>,
}

impl Demonstration {
    pub fn new(query_tokens: Vec<Token>, target_tokens: Vec<Token>) -> Result<Self> {
        if target_tokens.is_empty() {
            return Err(Error::Empty("demonstration target"));
        }
        Ok(Self {
            query_tokens,
            target_tokens,
        })
    }

    /// Checks the judging layout: exactly one `sep`, immediately followed by
    /// one of `verdicts`.
    pub fn check_judging_layout(&self, sep: Token, verdicts: &[Token]) -> Result<()> {
        let seps: Vec<usize> = self
            .target_tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == sep)
            .map(|(i, _)| i)
            .collect();
        match seps.as_slice() {
            [i] if self
                .target_tokens
                .get(i + 1)
                .is_some_and(|v| verdicts.contains(v)) =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "judging demonstration needs exactly one SEP followed by a verdict".into(),
            )),
        }
    }
}

/// Mean negative log-likelihood of the batch, and its exact gradient.
///
/// `loss = -(1/B) sum_j sum_t log pi(T_j[t] | q_j, T_j[..t])`
pub fn sft_loss(
    params: &PolicyParameters,
    batch: &[Demonstration],
) -> Result<(f64, PolicyParameters)> {
    if batch.is_empty() {
        return Err(Error::Empty("SFT batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for demo in batch {
        if demo.target_tokens.is_empty() {
            return Err(Error::Empty("demonstration target"));
        }
        for_each_step(params, &demo.query_tokens, &demo.target_tokens, |s| {
            loss -= s.probs[s.target].ln();
        })?;
        // minimizing NLL: gradient is the negated log-likelihood gradient
        accumulate_logprob_gradient(
            params,
            &demo.query_tokens,
            &demo.target_tokens,
            -scale,
            &mut grad,
        )?;
    }
    Ok((loss * scale, grad))
}

/// Mean negative log-likelihood only.
pub fn sft_loss_value(params: &PolicyParameters, batch: &[Demonstration]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("SFT batch"));
    }
    let mut loss = 0.0;
    for demo in batch {
        for_each_step(params, &demo.query_tokens, &demo.target_tokens, |s| {
            loss -= s.probs[s.target].ln();
        })?;
    }
    Ok(loss / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sft.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sft.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub params: PolicyParameters,
    /// Full-dataset mean loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD (optionally with heavy-ball momentum) over shuffled epochs.
pub fn train_sft<R: Rng + ?Sized>(
    params: &PolicyParameters,
    dataset: &[Demonstration],
    config: &SftConfig,
    rng: &mut R,
) -> Result<SftOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("SFT dataset"));
    }
    config.validate()?;
    let mut params = params.clone();
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (loss, grad) = sft_loss(&params, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "SFT loss {loss} at epoch {epoch}, step {step} (learning rate {})",
                    config.learning_rate
                )));
            }
            if config.momentum > 0.0 {
                velocity.scale(config.momentum);
                velocity.add_scaled(&grad, 1.0)?;
                params.add_scaled(&velocity, -config.learning_rate)?;
            } else {
                params.add_scaled(&grad, -config.learning_rate)?;
            }
        }
        epoch_losses.push(sft_loss_value(&params, dataset)?);
    }
    Ok(SftOutcome {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{logprob_gradient, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo(q: &[Token], t: &[Token]) -> Demonstration {
        Demonstration::new(q.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn uniform_loss_is_length_times_log_v() {
        let params = PolicyParameters::zeros(Vocabulary::new(4).unwrap(), 2).unwrap();
        let (loss, _) = sft_loss(&params, &[demo(&[3], &[3, 2, 3, 2, 1])]).unwrap();
        assert!((loss - 5.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_rejected() {
        let params = PolicyParameters::zeros(Vocabulary::new(4).unwrap(), 2).unwrap();
        assert!(sft_loss(&params, &[]).is_err());
        assert!(Demonstration::new(vec![3], vec![]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_sft(&params, &[], &SftConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn confident_policy_has_near_zero_loss() {
        let mut params = PolicyParameters::zeros(Vocabulary::new(4).unwrap(), 1).unwrap();
        params.set_bias(3, 40.0);
        let (loss, _) = sft_loss(&params, &[demo(&[2], &[3, 3, 3])]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
    }

    #[test]
    fn gradient_is_negated_mean_logprob_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vocab = Vocabulary::new(6).unwrap();
        let params = PolicyParameters::random(vocab, 2, 0.8, &mut rng).unwrap();
        let batch = vec![demo(&[3, 4], &[5, 2, 1]), demo(&[5], &[4, 4, 3, 1])];
        let (_, grad) = sft_loss(&params, &batch).unwrap();
        let mut expected = params.zeros_like();
        for d in &batch {
            let g = logprob_gradient(&params, &d.query_tokens, &d.target_tokens).unwrap();
            expected.add_scaled(&g, -0.5).unwrap();
        }
        for (a, b) in grad.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let params = PolicyParameters::zeros(Vocabulary::new(4).unwrap(), 2).unwrap();
        let config = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let out = train_sft(
            &params,
            &[demo(&[3], &[2, 1])],
            &config,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.params, params);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn memorizes_a_single_demonstration() {
        let params = PolicyParameters::zeros(Vocabulary::new(4).unwrap(), 2).unwrap();
        let target = [3, 3, 2, 2, 1];
        let data = [demo(&[2], &target)];
        let config = SftConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 0.5,
            momentum: 0.0,
        };
        let out = train_sft(&params, &data, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let per_token = out.epoch_losses.last().unwrap() / target.len() as f64;
        assert!(per_token < 0.05, "per-token loss {per_token}");
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let vocab = Vocabulary::new(5).unwrap();
        let params = PolicyParameters::zeros(vocab, 2).unwrap();
        let data: Vec<_> = (0..10)
            .map(|i| demo(&[3 + i % 2], &[4, 3 + (i % 3) % 2, 1]))
            .collect();
        let config = SftConfig {
            epochs: 3,
            batch_size: 3,
            learning_rate: 0.2,
            momentum: 0.5,
        };
        let a = train_sft(&params, &data, &config, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = train_sft(&params, &data, &config, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn judging_layout_check() {
        let ok = demo(&[3], &[9, 10, 14, 2, 14, 1]);
        assert!(ok.check_judging_layout(2, &[14, 15]).is_ok());
        let two_seps = demo(&[3], &[2, 14, 2, 14]);
        assert!(two_seps.check_judging_layout(2, &[14, 15]).is_err());
        let no_verdict = demo(&[3], &[9, 2, 9]);
        assert!(no_verdict.check_judging_layout(2, &[14, 15]).is_err());
    }
}
