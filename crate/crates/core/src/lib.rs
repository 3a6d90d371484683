//! Data-free, model-agnostic global explanations for text classifiers.
//!
//! The pipeline steers a language model with the classifier under study
//! (PUCT Monte Carlo tree search decoding), collects class-stereotypical
//! texts, and fits a tf-idf logistic regression on them. The regression
//! weights are the per-class word importances. A tf-idf logistic regression
//! "glass-box" doubles as a guided classifier and as ground truth for the
//! faithfulness metrics in [`evaluation`].
//!
//! Module map:
//!
//! - [`corpus`]: normalization, unigram tokenization, vocabularies, JSONL corpora.
//! - [`lm`]: the language-model interface, a smoothed n-gram model and the
//!   out-of-process bridge client.
//! - [`glassbox`]: tf-idf vectorizer, multinomial logistic regression and the
//!   [`ClassifierScorer`] interface.
//! - [`mcts`]: cooperative decoding with PUCT tree search.
//! - [`explainer`]: guided / unguided corpus generation and explanation fitting.
//! - [`evaluation`]: Spearman, precision/recall and insertion/deletion metrics.
//! - [`synthetic`]: planted-keyword corpora used by tests, benches and demos.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod fingerprint;
pub mod glassbox;
pub mod lm;
pub mod mcts;
pub mod synthetic;

pub use corpus::{tokenize, Document, LabeledCorpus, TokenId, TokenSeq, Vocabulary};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, ImportanceMap};
pub use explainer::{ExplainMode, ExplainerConfig, Explanation};
pub use glassbox::{ClassifierScorer, GlassBox, LogRegModel, LogRegParams, TfIdfVectorizer};
pub use lm::{LanguageModel, NGramLm};
pub use mcts::{Aggregation, GenerationResult, MctsConfig, TokenChoice};
