//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use coop_explain_core::fingerprint::fingerprint;
use coop_explain_core::glassbox::{argmax, GlassBoxOptions};
use coop_explain_core::lm::NGramOptions;
use coop_explain_core::synthetic::{PlantedConfig, PlantedCorpus};
use coop_explain_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` regular tokens plus EOS (id `n`). Priors are drawn per context from
/// `seed`, or uniform when `seed` is `None`.
pub struct TableLm {
    pub n: usize,
    pub seed: Option<u64>,
}

impl TableLm {
    pub fn uniform(n: usize) -> Self {
        TableLm { n, seed: None }
    }
}

impl LanguageModel for TableLm {
    fn vocab_size(&self) -> usize {
        self.n + 1
    }
    fn eos_id(&self) -> TokenId {
        self.n as TokenId
    }
    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let Some(seed) = self.seed else {
            return Ok(vec![1.0 / (self.n + 1) as f64; self.n + 1]);
        };
        let key: Vec<u8> = context.iter().flat_map(|t| t.to_le_bytes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fingerprint(&key) ^ seed);
        let raw: Vec<f64> = (0..=self.n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|p| p / total).collect())
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        Ok(tokens
            .iter()
            .filter(|&&t| t as usize != self.n)
            .map(|t| format!("t{t}"))
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Binary scorer assigning every distinct text an independent pseudo-random
/// probability for class 0.
pub struct RandomTableScorer {
    pub names: Vec<String>,
    pub seed: u64,
}

impl RandomTableScorer {
    pub fn new(seed: u64) -> Self {
        RandomTableScorer {
            names: vec!["x".into(), "y".into()],
            seed,
        }
    }

    pub fn p0(&self, text: &str) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(fingerprint(text.as_bytes()) ^ self.seed);
        rng.gen()
    }
}

impl ClassifierScorer for RandomTableScorer {
    fn class_names(&self) -> &[String] {
        &self.names
    }
    fn score(&self, text: &str) -> Result<Vec<f64>> {
        let p = self.p0(text);
        Ok(vec![p, 1.0 - p])
    }
}

/// Every token sequence the search can complete: EOS-terminated sequences
/// shorter than `max_len`, plus every sequence of exactly `max_len` tokens.
pub fn enumerate_sequences(n: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let eos = n as TokenId;
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            if depth == max_len {
                out.push(prefix);
                continue;
            }
            let mut done = prefix.clone();
            done.push(eos);
            out.push(done);
            for t in 0..n as TokenId {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    out
}

/// Glass-box, n-gram LM and planted corpus for one planted configuration.
pub struct Planted {
    pub planted: PlantedCorpus,
    pub glassbox: GlassBox,
    pub lm: NGramLm,
}

pub fn planted_setup(config: PlantedConfig) -> Planted {
    let planted = config.generate().expect("planted corpus");
    let glassbox = GlassBox::train(&planted.corpus, GlassBoxOptions::default()).expect("glass-box");
    let lm = NGramLm::fit(&planted.corpus, NGramOptions::default()).expect("lm");
    Planted {
        planted,
        glassbox,
        lm,
    }
}

/// Search settings used by the planted experiments.
pub fn planted_mcts() -> MctsConfig {
    MctsConfig {
        playouts_per_token: 50,
        max_length: 20,
        rollout_max_tokens: 20,
        ..MctsConfig::default()
    }
}

pub fn explainer_config(texts_per_class: usize, seed: u64) -> ExplainerConfig {
    ExplainerConfig {
        texts_per_class,
        seed,
        mcts: planted_mcts(),
        ..ExplainerConfig::default()
    }
}

/// Straight-line replay of the replacement procedure; returns, per text,
/// (replacements made, replacement count at which the argmax changed).
pub fn replay_replacements(
    scorer: &dyn ClassifierScorer,
    texts: &[String],
    map: &ImportanceMap,
    top_k: usize,
) -> Vec<(usize, Option<usize>)> {
    let sorted = |class: &str| -> Vec<String> {
        let mut v: Vec<(String, f64)> = map
            .classes
            .get(class)
            .map(|m| m.iter().map(|(k, w)| (k.clone(), *w)).collect())
            .unwrap_or_default();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        v.into_iter().map(|(k, _)| k).collect()
    };
    let mut results = Vec::new();
    for text in texts {
        let mut words = tokenize(text);
        let scores = scorer.score(&words.join(" ")).unwrap();
        let original = argmax(&scores);
        let mut second = None;
        for c in 0..scores.len() {
            if c == original {
                continue;
            }
            match second {
                None => second = Some(c),
                Some(s) if scores[c] > scores[s] => second = Some(c),
                _ => {}
            }
        }
        let names = scorer.class_names();
        let removals = sorted(&names[original]);
        let inserts = sorted(&names[second.unwrap()]);
        let mut locked = vec![false; words.len()];
        let mut r = 0;
        let mut flipped = None;
        'outer: for w in removals.iter().take(top_k) {
            let Some(ins) = inserts.iter().find(|i| *i != w) else {
                continue;
            };
            for i in 0..words.len() {
                if !locked[i] && &words[i] == w {
                    words[i] = ins.clone();
                    locked[i] = true;
                    r += 1;
                    if argmax(&scorer.score(&words.join(" ")).unwrap()) != original {
                        flipped = Some(r);
                        break 'outer;
                    }
                }
            }
        }
        results.push((r, flipped));
    }
    results
}

pub fn replay_curve(traces: &[(usize, Option<usize>)]) -> Vec<(usize, f64)> {
    let max_r = traces.iter().map(|t| t.0).max().unwrap_or(0);
    (0..=max_r)
        .map(|r| {
            let flipped = traces
                .iter()
                .filter(|t| matches!(t.1, Some(f) if f <= r))
                .count();
            (r, flipped as f64 / traces.len() as f64)
        })
        .collect()
}

/// Independent Spearman: counting ranks, then the textbook Pearson sums.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let same = v.iter().filter(|&&b| b == a).count() as f64;
                below + (same + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (rx.iter().sum(), ry.iter().sum());
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|b| b * b).sum();
    let num = n * sxy - sx * sy;
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Top-`k` tokens of a class in an explanation.
pub fn top_tokens(expl: &Explanation, class: &str, k: usize) -> Vec<String> {
    expl.class(class)
        .map(|c| c.words.iter().take(k).map(|(t, _)| t.clone()).collect())
        .unwrap_or_default()
}
