//! Generator distributions p(x_t | x_{1:t-1}).
//!
//! Contexts never include BOS: a model that needs start padding adds it
//! itself. Distribution vectors are indexed by token id over the model's own
//! id space and sum to one.

mod bridge;
mod ngram;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use bridge::{BridgeMeta, LmBridgeClient, BRIDGE_ENV, PROTOCOL_VERSION};
pub use ngram::{NGramLm, NGramOptions};

use crate::corpus::{TokenId, TokenSeq};
use crate::error::{Error, Result};

/// An auto-regressive language model.
///
/// `next_token_dist` may be called concurrently; implementations that cannot
/// serve parallel requests serialize them internally.
pub trait LanguageModel: Send + Sync {
    /// Length of every distribution vector.
    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> TokenId;

    /// Probability of each token id following `context`.
    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>>;

    /// Renders tokens as text for classifier scoring. EOS is ignored.
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos_id(&self) -> TokenId {
        (**self).eos_id()
    }
    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_dist(context)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        (**self).detokenize(tokens)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos_id(&self) -> TokenId {
        (**self).eos_id()
    }
    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_dist(context)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        (**self).detokenize(tokens)
    }
}

/// Draws one token id from `dist` after tempering by `temperature`.
pub fn sample_token<R: Rng + ?Sized>(
    dist: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId> {
    let index = if temperature == 1.0 {
        WeightedIndex::new(dist)
    } else {
        WeightedIndex::new(dist.iter().map(|&p| p.powf(1.0 / temperature)))
    }
    .map_err(|e| Error::InvalidArgument(format!("cannot sample from distribution: {e}")))?;
    Ok(index.sample(rng) as TokenId)
}

/// Appends sampled tokens to `context` until EOS or `max_len` new tokens.
/// Deterministic for a given `seed`.
pub fn sample_continuation<L: LanguageModel + ?Sized>(
    lm: &L,
    context: &[TokenId],
    max_len: usize,
    seed: u64,
) -> Result<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_continuation_with(lm, context, max_len, 1.0, &mut rng)
}

pub fn sample_continuation_with<L: LanguageModel + ?Sized, R: Rng + ?Sized>(
    lm: &L,
    context: &[TokenId],
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<TokenSeq> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let eos = lm.eos_id();
    let mut out = context.to_vec();
    if out.last() == Some(&eos) {
        return Ok(out);
    }
    for _ in 0..max_len {
        let dist = lm.next_token_dist(&out)?;
        let next = sample_token(&dist, temperature, rng)?;
        out.push(next);
        if next == eos {
            break;
        }
    }
    Ok(out)
}

/// Σ_t log p(x_t | x_{1:t-1}), with a terminal EOS appended when absent.
pub fn sequence_logprob<L: LanguageModel + ?Sized>(lm: &L, tokens: &[TokenId]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let eos = lm.eos_id();
    let mut full = tokens.to_vec();
    if full.last() != Some(&eos) {
        full.push(eos);
    }
    let mut total = 0.0;
    for t in 0..full.len() {
        let dist = lm.next_token_dist(&full[..t])?;
        let p = dist.get(full[t] as usize).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("token id {} outside the model vocabulary", full[t]))
        })?;
        total += p.ln();
    }
    Ok(total)
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    /// Emits `script[t]` with probability 1 at step t, then EOS.
    pub struct ScriptedLm {
        pub vocab: usize,
        pub script: Vec<TokenId>,
    }

    impl LanguageModel for ScriptedLm {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn eos_id(&self) -> TokenId {
            self.vocab as TokenId - 1
        }
        fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
            let mut d = vec![0.0; self.vocab];
            let next = self
                .script
                .get(context.len())
                .copied()
                .unwrap_or(self.eos_id());
            d[next as usize] = 1.0;
            Ok(d)
        }
        fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
            Ok(tokens
                .iter()
                .filter(|&&t| t != self.eos_id())
                .map(|t| format!("w{t}"))
                .collect::<Vec<_>>()
                .join(" "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::ScriptedLm;
    use super::*;

    #[test]
    fn zero_budget_returns_context() {
        let lm = ScriptedLm {
            vocab: 4,
            script: vec![0, 1, 2],
        };
        assert_eq!(sample_continuation(&lm, &[2, 1], 0, 9).unwrap(), vec![2, 1]);
    }

    #[test]
    fn deterministic_model_has_unique_continuation() {
        let lm = ScriptedLm {
            vocab: 4,
            script: vec![0, 1, 2, 0],
        };
        let a = sample_continuation(&lm, &[], 10, 1).unwrap();
        let b = sample_continuation(&lm, &[], 10, 12345).unwrap();
        assert_eq!(a, vec![0, 1, 2, 0, 3]);
        assert_eq!(a, b);
        assert_eq!(sequence_logprob(&lm, &[0, 1, 2, 0]).unwrap(), 0.0);
    }

    #[test]
    fn budget_is_respected() {
        let lm = ScriptedLm {
            vocab: 4,
            script: vec![0; 100],
        };
        assert_eq!(sample_continuation(&lm, &[1], 5, 0).unwrap().len(), 6);
    }

    #[test]
    fn temperature_must_be_positive() {
        let lm = ScriptedLm {
            vocab: 3,
            script: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_continuation_with(&lm, &[], 3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn tempered_sampling_sharpens() {
        let dist = [0.6, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let cold = (0..n)
            .filter(|_| sample_token(&dist, 0.25, &mut rng).unwrap() == 0)
            .count() as f64
            / n as f64;
        // 0.6^4 / (0.6^4 + 0.4^4) ≈ 0.835
        assert!((cold - 0.835).abs() < 0.03, "cold = {cold}");
    }
}
