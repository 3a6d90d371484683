//! Run configuration: one JSON document, optionally patched by dotted flags.

use std::path::{Path, PathBuf};

use coop_explain_core::evaluation::EvalConfig;
use coop_explain_core::explainer::ExplainMode;
use coop_explain_core::fingerprint::{fingerprint_json, to_hex};
use coop_explain_core::glassbox::{GlassBoxOptions, LogRegParams, TfIdfOptions};
use coop_explain_core::lm::NGramOptions;
use coop_explain_core::synthetic::PlantedConfig;
use coop_explain_core::{ExplainerConfig, MctsConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

/// Where texts come from. `train` wins over `planted`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Labeled JSONL for the glass-box (and the LM, unless `lm_train` is set).
    pub train: Option<PathBuf>,
    /// Unlabeled or labeled JSONL for the n-gram LM.
    pub lm_train: Option<PathBuf>,
    /// Texts for insertion/deletion; defaults to the training corpus.
    pub eval: Option<PathBuf>,
    /// Synthetic planted-keyword corpus used when `train` is absent.
    pub planted: Option<PlantedConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub ngram: NGramOptions,
    /// Bridge endpoint; the `COOP_EXPLAIN_BRIDGE` variable takes precedence.
    pub bridge: Option<String>,
    pub bridge_timeout_secs: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            ngram: NGramOptions::default(),
            bridge: None,
            bridge_timeout_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerSection {
    pub texts_per_class: usize,
    pub mode: ExplainMode,
    pub tfidf: TfIdfOptions,
    pub regression: LogRegParams,
}

impl Default for ExplainerSection {
    fn default() -> Self {
        let d = ExplainerConfig::default();
        ExplainerSection {
            texts_per_class: d.texts_per_class,
            mode: d.mode,
            tfidf: d.tfidf,
            regression: d.regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub lm: LmSection,
    pub glassbox: GlassBoxOptions,
    pub mcts: MctsConfig,
    pub explainer: ExplainerSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            lm: LmSection::default(),
            glassbox: GlassBoxOptions::default(),
            mcts: MctsConfig::default(),
            explainer: ExplainerSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure::config("config_invalid", message)
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// Sets `path` (dot-separated) inside `root`. Intermediate objects are
/// created for null slots, so optional sections can be filled from flags.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Failure> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("malformed override path {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            return Err(invalid(format!(
                "{path}: {} is not a section",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = map.entry((*part).to_owned()).or_insert(Value::Null);
    }
    unreachable!("path has at least one part")
}

impl RunConfig {
    /// Loads `path` (defaults when `None`) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Failure::config("config_not_found", format!("{}: {e}", p.display()))
                })?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        if !value.is_object() {
            return Err(invalid("top level must be a JSON object"));
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_value(raw))?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.mcts
            .validate()
            .map_err(|e| invalid(format!("mcts: {e}")))?;
        if self.explainer.texts_per_class == 0 {
            return Err(invalid("explainer.texts_per_class must be >= 1"));
        }
        if let Some(planted) = &self.corpus.planted {
            planted
                .validate()
                .map_err(|e| invalid(format!("corpus.planted: {e}")))?;
        }
        if self.lm.bridge_timeout_secs.is_nan() || self.lm.bridge_timeout_secs <= 0.0 {
            return Err(invalid("lm.bridge_timeout_secs must be positive"));
        }
        Ok(())
    }

    /// 64-bit hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        to_hex(fingerprint_json(&c))
    }

    pub fn explainer_config(&self, workers: usize) -> ExplainerConfig {
        ExplainerConfig {
            texts_per_class: self.explainer.texts_per_class,
            mode: self.explainer.mode,
            seed: self.seed,
            mcts: self.mcts.clone(),
            tfidf: self.explainer.tfidf,
            regression: self.explainer.regression,
            workers,
        }
    }
}
