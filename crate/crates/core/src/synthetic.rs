//! Planted-keyword corpora with known ground truth.
//!
//! Each class owns a few exclusive keywords drawn at an elevated rate, a list
//! of associated words with decaying frequency, and shares a filler
//! vocabulary with every other class. A fraction of each class's associated
//! list can be borrowed from the next class to create cross-class overlap.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabeledCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub num_classes: usize,
    pub num_docs: usize,
    pub keywords_per_class: usize,
    pub associated_per_class: usize,
    pub filler_size: usize,
    /// Fraction of each class's associated words taken from the next class.
    pub overlap: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-position probability of a class keyword.
    pub keyword_rate: f64,
    /// Per-position probability of an associated word.
    pub associated_rate: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_classes: 4,
            num_docs: 5000,
            keywords_per_class: 5,
            associated_per_class: 10,
            filler_size: 60,
            overlap: 0.0,
            min_len: 20,
            max_len: 40,
            keyword_rate: 0.06,
            associated_rate: 0.06,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: LabeledCorpus,
    /// Exclusive keywords per class, most frequent first.
    pub keywords: Vec<Vec<String>>,
    /// Associated words per class (possibly shared), most frequent first.
    pub associated: Vec<Vec<String>>,
    pub filler: Vec<String>,
}

pub fn class_name(c: usize) -> String {
    format!("c{c}")
}

fn keyword(c: usize, i: usize) -> String {
    format!("key{c}x{i}")
}

fn associated_word(c: usize, i: usize) -> String {
    format!("assoc{c}x{i}")
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.num_docs < self.num_classes {
            return bad("need at least one document per class");
        }
        if self.keywords_per_class == 0 || self.filler_size == 0 {
            return bad("keyword and filler pools must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        let rates = self.keyword_rate + self.associated_rate;
        if self.keyword_rate < 0.0 || self.associated_rate < 0.0 || rates > 1.0 {
            return bad("keyword_rate + associated_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<PlantedCorpus> {
        self.validate()?;
        let k = self.num_classes;
        let keywords: Vec<Vec<String>> = (0..k)
            .map(|c| {
                (0..self.keywords_per_class)
                    .map(|i| keyword(c, i))
                    .collect()
            })
            .collect();
        let borrowed = (self.overlap * self.associated_per_class as f64).round() as usize;
        // The tail of each list (its rarest words) comes from the next class's head.
        let associated: Vec<Vec<String>> = (0..k)
            .map(|c| {
                let own = self.associated_per_class - borrowed;
                (0..own)
                    .map(|i| associated_word(c, i))
                    .chain((0..borrowed).map(|i| associated_word((c + 1) % k, i)))
                    .collect()
            })
            .collect();
        let filler: Vec<String> = (0..self.filler_size).map(|i| format!("w{i}")).collect();

        let decay = |n: usize| WeightedIndex::new((0..n).map(|i| 1.0 / (i + 1) as f64));
        let kw_dist = decay(self.keywords_per_class).expect("non-empty");
        let assoc_dist = (self.associated_per_class > 0)
            .then(|| decay(self.associated_per_class).expect("non-empty"));

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut documents = Vec::with_capacity(self.num_docs);
        for d in 0..self.num_docs {
            let c = d % k;
            let len = rng.gen_range(self.min_len..=self.max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < self.keyword_rate {
                        keywords[c][kw_dist.sample(&mut rng)].as_str()
                    } else if u < self.keyword_rate + self.associated_rate && assoc_dist.is_some() {
                        associated[c][assoc_dist.as_ref().unwrap().sample(&mut rng)].as_str()
                    } else {
                        filler[rng.gen_range(0..filler.len())].as_str()
                    }
                })
                .collect();
            documents.push(Document::new(words.join(" "), Some(c)));
        }
        let corpus = LabeledCorpus::new(documents, (0..k).map(class_name).collect());
        Ok(PlantedCorpus {
            corpus,
            keywords,
            associated,
            filler,
        })
    }
}
