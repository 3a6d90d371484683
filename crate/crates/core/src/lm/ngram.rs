use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::corpus::{build_vocabulary, LabeledCorpus, TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramOptions {
    pub order: usize,
    /// Add-k pseudo-count applied within the selected context.
    pub smoothing_k: f64,
    pub min_count: usize,
    /// Fall back to the longest stored context suffix. When off, an unseen
    /// full context yields the uniform distribution.
    pub backoff: bool,
}

impl Default for NGramOptions {
    fn default() -> Self {
        NGramOptions {
            order: 3,
            smoothing_k: 0.1,
            min_count: 1,
            backoff: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    next: HashMap<TokenId, u64>,
    total: u64,
}

/// Add-k smoothed n-gram model with stupid backoff over context lengths.
///
/// The support is the regular vocabulary plus EOS. BOS and UNK always get
/// probability zero; UNK may appear in contexts but is never predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NGramRepr", into = "NGramRepr")]
pub struct NGramLm {
    options: NGramOptions,
    vocabulary: Vocabulary,
    contexts: HashMap<Vec<TokenId>, ContextCounts>,
}

type StoredContext = (Vec<TokenId>, Vec<(TokenId, u64)>);

#[derive(Serialize, Deserialize)]
struct NGramRepr {
    options: NGramOptions,
    vocabulary: Vocabulary,
    /// `(context, [(next, count)])`, sorted.
    contexts: Vec<StoredContext>,
}

impl From<NGramLm> for NGramRepr {
    fn from(lm: NGramLm) -> Self {
        let mut contexts: Vec<_> = lm
            .contexts
            .into_iter()
            .map(|(ctx, counts)| {
                let mut next: Vec<_> = counts.next.into_iter().collect();
                next.sort_unstable();
                (ctx, next)
            })
            .collect();
        contexts.sort_unstable();
        NGramRepr {
            options: lm.options,
            vocabulary: lm.vocabulary,
            contexts,
        }
    }
}

impl TryFrom<NGramRepr> for NGramLm {
    type Error = Error;

    fn try_from(repr: NGramRepr) -> Result<Self> {
        validate_options(&repr.options)?;
        let contexts = repr
            .contexts
            .into_iter()
            .map(|(ctx, next)| {
                let total = next.iter().map(|&(_, c)| c).sum();
                (
                    ctx,
                    ContextCounts {
                        next: next.into_iter().collect(),
                        total,
                    },
                )
            })
            .collect();
        Ok(NGramLm {
            options: repr.options,
            vocabulary: repr.vocabulary,
            contexts,
        })
    }
}

fn validate_options(options: &NGramOptions) -> Result<()> {
    if options.order == 0 {
        return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
    }
    if !(options.smoothing_k > 0.0 && options.smoothing_k.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing_k must be positive, got {}",
            options.smoothing_k
        )));
    }
    Ok(())
}

impl NGramLm {
    /// Counts n-grams of every length up to `order` over BOS-padded,
    /// EOS-terminated documents.
    pub fn fit(corpus: &LabeledCorpus, options: NGramOptions) -> Result<Self> {
        validate_options(&options)?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocabulary = build_vocabulary(corpus, options.min_count)?;
        let pad = options.order - 1;
        let mut contexts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for doc in &corpus.documents {
            let mut padded = vec![vocabulary.bos(); pad];
            padded.extend(vocabulary.encode_tokens(&doc.tokens));
            padded.push(vocabulary.eos());
            for i in pad..padded.len() {
                let target = padded[i];
                if target == vocabulary.unk() {
                    continue;
                }
                for len in 0..=pad {
                    let entry = contexts.entry(padded[i - len..i].to_vec()).or_default();
                    *entry.next.entry(target).or_default() += 1;
                    entry.total += 1;
                }
            }
        }
        Ok(NGramLm {
            options,
            vocabulary,
            contexts,
        })
    }

    pub fn options(&self) -> &NGramOptions {
        &self.options
    }

    pub fn order(&self) -> usize {
        self.options.order
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    /// Number of tokens with nonzero probability: the regular vocabulary plus EOS.
    pub fn support_size(&self) -> usize {
        self.vocabulary.len() + 1
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Raw count of `next` after the exact context `ctx` (BOS ids included).
    pub fn count(&self, ctx: &[TokenId], next: TokenId) -> u64 {
        self.contexts
            .get(ctx)
            .and_then(|c| c.next.get(&next).copied())
            .unwrap_or(0)
    }

    /// The stored context the distribution for `context` is read from, if any.
    pub fn resolve_context(&self, context: &[TokenId]) -> Option<Vec<TokenId>> {
        let pad = self.options.order - 1;
        let mut full = vec![self.vocabulary.bos(); pad.saturating_sub(context.len())];
        full.extend_from_slice(&context[context.len().saturating_sub(pad)..]);
        let shortest = if self.options.backoff { 0 } else { pad };
        (shortest..=pad)
            .rev()
            .map(|len| &full[pad - len..])
            .find(|ctx| self.contexts.contains_key(*ctx))
            .map(<[TokenId]>::to_vec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    #[cfg(test)]
    fn counts_are_consistent(&self) -> bool {
        self.contexts
            .values()
            .all(|c| c.next.values().sum::<u64>() == c.total)
    }
}

impl LanguageModel for NGramLm {
    fn vocab_size(&self) -> usize {
        self.vocabulary.id_space()
    }

    fn eos_id(&self) -> TokenId {
        self.vocabulary.eos()
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let k = self.options.smoothing_k;
        let support = self.support_size() as f64;
        let counts = self
            .resolve_context(context)
            .and_then(|ctx| self.contexts.get(&ctx));
        let total = counts.map_or(0, |c| c.total) as f64;
        let denom = total + k * support;
        let mut dist = vec![k / denom; self.vocabulary.id_space()];
        dist[self.vocabulary.bos() as usize] = 0.0;
        dist[self.vocabulary.unk() as usize] = 0.0;
        if let Some(counts) = counts {
            for (&next, &c) in &counts.next {
                dist[next as usize] = (c as f64 + k) / denom;
            }
        }
        Ok(dist)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        Ok(self.vocabulary.decode(tokens))
    }
}
