//! Global explanations from generated corpora.
//!
//! Guided mode decodes `texts_per_class` texts for every class with the
//! classifier steering the search, labels each text with the class it was
//! steered toward, and fits a tf-idf logistic regression on the pooled
//! corpus. Its per-class weights are the explanation. Baseline mode samples
//! the language model without guidance and labels texts with the
//! classifier's argmax afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabeledCorpus};
use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint_json, to_hex};
use crate::glassbox::{
    argmax, fit_logreg, rank_features, ClassifierScorer, LogRegParams, SparseVector, TfIdfOptions,
    TfIdfVectorizer,
};
use crate::lm::{sample_continuation_with, LanguageModel};
use crate::mcts::{generate, GeneratedSample, MctsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMode {
    /// Classifier-guided generation, labels = guidance class.
    Therapy,
    /// Unguided sampling, labels = classifier argmax.
    Baseline,
}

impl ExplainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExplainMode::Therapy => "therapy",
            ExplainMode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    pub texts_per_class: usize,
    pub mode: ExplainMode,
    pub seed: u64,
    pub mcts: MctsConfig,
    pub tfidf: TfIdfOptions,
    pub regression: LogRegParams,
    /// Parallel generations; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            texts_per_class: 200,
            mode: ExplainMode::Therapy,
            seed: 0,
            mcts: MctsConfig::default(),
            tfidf: TfIdfOptions::default(),
            regression: LogRegParams::default(),
            workers: 1,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.texts_per_class == 0 {
            return Err(Error::InvalidArgument(
                "texts_per_class must be >= 1".into(),
            ));
        }
        self.mcts.validate()
    }

    pub fn hash(&self) -> String {
        to_hex(fingerprint_json(self))
    }
}

/// Per-text seeds for one class: a fixed ChaCha stream per class, so the
/// first `n` seeds do not depend on how many are drawn.
pub fn derive_seeds(master: u64, stream: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 1 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Generated texts with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub class_names: Vec<String>,
    pub samples: Vec<GeneratedSample>,
    pub warnings: Vec<String>,
}

impl GeneratedCorpus {
    /// Labels are the sample classes; class names are kept in scorer order and
    /// classes without samples are dropped.
    pub fn to_labeled(&self) -> LabeledCorpus {
        let present: Vec<String> = self
            .class_names
            .iter()
            .filter(|c| self.samples.iter().any(|s| &s.class == *c))
            .cloned()
            .collect();
        let documents = self
            .samples
            .iter()
            .map(|s| {
                let label = present.iter().position(|c| *c == s.class);
                Document::new(s.text.clone(), label)
            })
            .collect();
        LabeledCorpus::new(documents, present)
    }

    /// The first `n` samples of every class, in generation order.
    pub fn truncate_per_class(&self, n: usize) -> Result<GeneratedCorpus> {
        let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
        let samples: Vec<GeneratedSample> = self
            .samples
            .iter()
            .filter(|s| {
                let k = taken.entry(s.class.as_str()).or_default();
                *k += 1;
                *k <= n
            })
            .cloned()
            .collect();
        for class in &self.class_names {
            let have = taken.get(class.as_str()).copied().unwrap_or(0);
            if have < n {
                return Err(Error::InsufficientCorpus(format!(
                    "class {class:?} has {have} texts, {n} requested"
                )));
            }
        }
        Ok(GeneratedCorpus {
            class_names: self.class_names.clone(),
            samples,
            warnings: self.warnings.clone(),
        })
    }

    pub fn class_frequencies(&self) -> BTreeMap<String, usize> {
        let mut freq: BTreeMap<String, usize> =
            self.class_names.iter().map(|c| (c.clone(), 0)).collect();
        for s in &self.samples {
            *freq.entry(s.class.clone()).or_default() += 1;
        }
        freq
    }
}

/// `n` guided generations for `class`, labeled with `class`.
pub fn generate_class_corpus<L: LanguageModel + ?Sized>(
    lm: &L,
    scorer: &dyn ClassifierScorer,
    class: usize,
    n: usize,
    config: &ExplainerConfig,
) -> Result<GeneratedCorpus> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let class_name = scorer
        .class_names()
        .get(class)
        .cloned()
        .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
    let config_hash = config.mcts.hash();
    let seeds = derive_seeds(config.seed, class as u64 + 1, n);
    let one = |seed: u64| -> Result<GeneratedSample> {
        let mcts = MctsConfig {
            rng_seed: seed,
            ..config.mcts.clone()
        };
        let result = generate(lm, scorer, class, &[], &mcts)?;
        Ok(GeneratedSample {
            text: result.text,
            class: class_name.clone(),
            final_score: result.final_score,
            seed,
            config_hash: config_hash.clone(),
        })
    };
    let samples = if config.workers == 1 {
        seeds.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()?
    } else {
        run_pool(config.workers, || {
            seeds
                .par_iter()
                .map(|&s| one(s))
                .collect::<Result<Vec<_>>>()
        })??
    };
    Ok(GeneratedCorpus {
        class_names: scorer.class_names().to_vec(),
        samples,
        warnings: Vec::new(),
    })
}

/// `n_total` unguided samples labeled by the scorer's argmax (ties → lowest class).
pub fn generate_baseline_corpus<L: LanguageModel + ?Sized>(
    lm: &L,
    scorer: &dyn ClassifierScorer,
    n_total: usize,
    config: &ExplainerConfig,
) -> Result<GeneratedCorpus> {
    config.validate()?;
    let classes = scorer.class_names().to_vec();
    if n_total < classes.len() {
        return Err(Error::InvalidArgument(format!(
            "n_total {n_total} is below the number of classes {}",
            classes.len()
        )));
    }
    let config_hash = config.mcts.hash();
    let seeds = derive_seeds(config.seed, 0, n_total);
    let one = |seed: u64| -> Result<GeneratedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = sample_continuation_with(
            lm,
            &[],
            config.mcts.max_length,
            config.mcts.rollout_temperature,
            &mut rng,
        )?;
        let text = lm.detokenize(&tokens)?;
        let scores = scorer.score(&text)?;
        let label = argmax(&scores);
        Ok(GeneratedSample {
            text,
            class: classes[label].clone(),
            final_score: scores[label],
            seed,
            config_hash: config_hash.clone(),
        })
    };
    let samples = if config.workers == 1 {
        seeds.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()?
    } else {
        run_pool(config.workers, || {
            seeds
                .par_iter()
                .map(|&s| one(s))
                .collect::<Result<Vec<_>>>()
        })??
    };
    let mut corpus = GeneratedCorpus {
        class_names: classes,
        samples,
        warnings: Vec::new(),
    };
    for (class, count) in corpus.class_frequencies() {
        if count == 0 {
            corpus
                .warnings
                .push(format!("class {class:?} absent from baseline labels"));
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExplanation {
    pub class: String,
    /// Every feature of the explanation vocabulary, heaviest first, ties by token.
    pub words: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExplanationMeta {
    pub method: String,
    pub config_hash: String,
    /// Fingerprint of the generated corpus the regression was fitted on.
    pub generated_corpus_hash: String,
    /// Training-corpus fingerprint of the explained classifier, when known.
    #[serde(default)]
    pub scorer_corpus_hash: Option<String>,
    pub texts_per_class: usize,
    pub class_frequencies: BTreeMap<String, usize>,
    pub stop_words: String,
    pub rollout_temperature: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub classes: Vec<ClassExplanation>,
    pub metadata: ExplanationMeta,
}

impl Explanation {
    pub fn class(&self, name: &str) -> Option<&ClassExplanation> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// `class,token,weight,rank` rows, rank starting at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["class", "token", "weight", "rank"])?;
        for c in &self.classes {
            for (rank, (token, weight)) in c.words.iter().enumerate() {
                writer.write_record([
                    c.class.as_str(),
                    token.as_str(),
                    &weight.to_string(),
                    &(rank + 1).to_string(),
                ])?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits UTF-8"))
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let csv_path = csv_path.as_ref();
        fs::write(json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.to_csv_string()?).map_err(|e| Error::io(csv_path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Fits the explanation regression on a generated corpus.
///
/// The vectorizer is built on the whole corpus, all classes pooled.
/// Documents are put in a canonical order first, so the result does not
/// depend on the order texts were produced in.
pub fn fit_explanation(
    generated: &LabeledCorpus,
    tfidf: TfIdfOptions,
    regression: LogRegParams,
) -> Result<Explanation> {
    if generated.num_classes() < 2 {
        return Err(Error::Degenerate(format!(
            "{} class(es) in the generated corpus",
            generated.num_classes()
        )));
    }
    generated.validate_labeled()?;
    let mut docs: Vec<&Document> = generated.documents.iter().collect();
    docs.sort_by(|a, b| a.text.cmp(&b.text).then(a.label.cmp(&b.label)));
    let canonical = LabeledCorpus::new(
        docs.into_iter().cloned().collect(),
        generated.class_names.clone(),
    );

    let vectorizer = TfIdfVectorizer::fit(&canonical, tfidf)?;
    let xs: Vec<SparseVector> = canonical
        .documents
        .iter()
        .map(|d| vectorizer.transform(d))
        .collect();
    let ys = canonical.labels().ok_or(Error::InconsistentLabeling)?;
    let model = fit_logreg(
        &xs,
        &ys,
        vectorizer.num_features(),
        canonical.class_names.clone(),
        regression,
    )?;
    let classes = model
        .class_names
        .iter()
        .zip(&model.weights)
        .map(|(name, row)| ClassExplanation {
            class: name.clone(),
            words: rank_features(row, |f| vectorizer.feature_name(f), |_| true),
        })
        .collect();
    let class_frequencies = canonical
        .class_names
        .iter()
        .cloned()
        .zip(canonical.class_counts())
        .collect();
    Ok(Explanation {
        classes,
        metadata: ExplanationMeta {
            method: "logreg_tfidf".into(),
            generated_corpus_hash: to_hex(canonical.fingerprint()),
            class_frequencies,
            stop_words: "none".into(),
            ..ExplanationMeta::default()
        },
    })
}

/// Explanation plus the corpus it was fitted on.
#[derive(Debug, Clone)]
pub struct ExplainOutcome {
    pub explanation: Explanation,
    pub generated: GeneratedCorpus,
}

/// Generates a corpus with the configured mode and fits the explanation.
pub fn explain<L: LanguageModel + ?Sized>(
    lm: &L,
    scorer: &dyn ClassifierScorer,
    config: &ExplainerConfig,
) -> Result<ExplainOutcome> {
    let generated = generate_corpus(lm, scorer, config)?;
    let explanation = explain_generated(&generated, config)?;
    Ok(ExplainOutcome {
        explanation,
        generated,
    })
}

/// Generation half of [`explain`].
pub fn generate_corpus<L: LanguageModel + ?Sized>(
    lm: &L,
    scorer: &dyn ClassifierScorer,
    config: &ExplainerConfig,
) -> Result<GeneratedCorpus> {
    config.validate()?;
    let classes = scorer.num_classes();
    if classes < 2 {
        return Err(Error::Degenerate(format!("scorer has {classes} class(es)")));
    }
    match config.mode {
        ExplainMode::Therapy => {
            let mut all = GeneratedCorpus {
                class_names: scorer.class_names().to_vec(),
                samples: Vec::new(),
                warnings: Vec::new(),
            };
            for class in 0..classes {
                let part =
                    generate_class_corpus(lm, scorer, class, config.texts_per_class, config)?;
                all.samples.extend(part.samples);
            }
            Ok(all)
        }
        ExplainMode::Baseline => {
            generate_baseline_corpus(lm, scorer, config.texts_per_class * classes, config)
        }
    }
}

/// Fitting half of [`explain`], with run metadata filled in.
pub fn explain_generated(
    generated: &GeneratedCorpus,
    config: &ExplainerConfig,
) -> Result<Explanation> {
    let mut explanation =
        fit_explanation(&generated.to_labeled(), config.tfidf, config.regression)?;
    let meta = &mut explanation.metadata;
    meta.method = config.mode.as_str().into();
    meta.config_hash = config.hash();
    meta.texts_per_class = config.texts_per_class;
    meta.class_frequencies = generated.class_frequencies();
    meta.rollout_temperature = config.mcts.rollout_temperature;
    meta.warnings = generated.warnings.clone();
    Ok(explanation)
}
