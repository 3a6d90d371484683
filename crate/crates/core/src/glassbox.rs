//! Tf-idf features, multinomial logistic regression and the classifier-scorer
//! interface.
//!
//! [`GlassBox`] bundles a vectorizer with a regression model. It is the
//! reference classifier of the evaluation harness: it scores texts like any
//! black box, while its weights are the ground-truth word importances.
//! The explainer reuses the same two building blocks to fit its own model on
//! generated texts.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabeledCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::fingerprint::to_hex;

/// Feature index → value, sorted by index, no duplicates.
pub type SparseVector = Vec<(usize, f64)>;

/// D(c | x): class-membership probabilities for a text.
pub trait ClassifierScorer: Send + Sync {
    fn class_names(&self) -> &[String];

    /// One probability per class, summing to one.
    fn score(&self, text: &str) -> Result<Vec<f64>>;

    fn num_classes(&self) -> usize {
        self.class_names().len()
    }
}

impl<T: ClassifierScorer + ?Sized> ClassifierScorer for &T {
    fn class_names(&self) -> &[String] {
        (**self).class_names()
    }
    fn score(&self, text: &str) -> Result<Vec<f64>> {
        (**self).score(text)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfIdfOptions {
    pub min_count: usize,
    /// Use 1 + ln(tf) instead of the raw count.
    pub sublinear_tf: bool,
}

impl Default for TfIdfOptions {
    fn default() -> Self {
        TfIdfOptions {
            min_count: 1,
            sublinear_tf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfVectorizer {
    vocabulary: Vocabulary,
    idf: Vec<f64>,
    sublinear_tf: bool,
}

impl TfIdfVectorizer {
    /// Smoothed idf: `ln((1 + N) / (1 + df)) + 1`.
    pub fn fit(corpus: &LabeledCorpus, options: TfIdfOptions) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocabulary = crate::corpus::build_vocabulary(corpus, options.min_count)?;
        let mut df = vec![0usize; vocabulary.len()];
        for doc in &corpus.documents {
            let seen: HashSet<usize> = doc
                .tokens
                .iter()
                .filter_map(|t| vocabulary.id(t))
                .map(|id| id as usize)
                .collect();
            for f in seen {
                df[f] += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Ok(TfIdfVectorizer {
            vocabulary,
            idf,
            sublinear_tf: options.sublinear_tf,
        })
    }

    pub fn from_parts(vocabulary: Vocabulary, idf: Vec<f64>, sublinear_tf: bool) -> Result<Self> {
        if idf.len() != vocabulary.len() {
            return Err(Error::InvalidArgument(format!(
                "{} idf values for {} features",
                idf.len(),
                vocabulary.len()
            )));
        }
        Ok(TfIdfVectorizer {
            vocabulary,
            idf,
            sublinear_tf,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn num_features(&self) -> usize {
        self.idf.len()
    }

    pub fn feature_name(&self, feature: usize) -> &str {
        &self.vocabulary.tokens()[feature]
    }

    /// L2-normalized tf-idf vector. Out-of-vocabulary tokens are dropped;
    /// a document without known tokens maps to the empty (zero) vector.
    pub fn transform_tokens(&self, tokens: &[String]) -> SparseVector {
        let mut ids: Vec<usize> = tokens
            .iter()
            .filter_map(|t| self.vocabulary.id(t))
            .map(|id| id as usize)
            .collect();
        ids.sort_unstable();
        let mut out: SparseVector = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, count)) if *last == id => *count += 1.0,
                _ => out.push((id, 1.0)),
            }
        }
        for (f, v) in &mut out {
            let tf = if self.sublinear_tf { 1.0 + v.ln() } else { *v };
            *v = tf * self.idf[*f];
        }
        let norm = out.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut out {
                *v /= norm;
            }
        }
        out
    }

    pub fn transform(&self, doc: &Document) -> SparseVector {
        self.transform_tokens(&doc.tokens)
    }

    pub fn transform_text(&self, text: &str) -> SparseVector {
        self.transform_tokens(&crate::corpus::tokenize(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegParams {
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub lr: f64,
    pub tol: f64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams {
            l2_lambda: 1e-3,
            max_iters: 2000,
            lr: 0.5,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// classes × features
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub l2_lambda: f64,
    pub trained_iterations: usize,
    pub converged: bool,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn logits(weights: &[Vec<f64>], bias: &[f64], x: &SparseVector) -> Vec<f64> {
    weights
        .iter()
        .zip(bias)
        .map(|(row, b)| b + x.iter().map(|&(f, v)| row[f] * v).sum::<f64>())
        .collect()
}

/// Mean cross-entropy plus `λ/2 · ‖W‖²` (bias unregularized).
pub fn objective(
    weights: &[Vec<f64>],
    bias: &[f64],
    xs: &[SparseVector],
    ys: &[usize],
    l2_lambda: f64,
) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = logits(weights, bias, x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum();
    let reg: f64 = weights.iter().flatten().map(|w| w * w).sum();
    data / n + 0.5 * l2_lambda * reg
}

/// Gradient of the data term only, as (dW, db).
fn data_gradient(
    weights: &[Vec<f64>],
    bias: &[f64],
    xs: &[SparseVector],
    ys: &[usize],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let classes = weights.len();
    let features = weights.first().map_or(0, Vec::len);
    let mut gw = vec![vec![0.0; features]; classes];
    let mut gb = vec![0.0; classes];
    let inv_n = 1.0 / xs.len() as f64;
    for (x, &y) in xs.iter().zip(ys) {
        let mut p = softmax(&logits(weights, bias, x));
        p[y] -= 1.0;
        for (c, residual) in p.into_iter().enumerate() {
            gb[c] += residual * inv_n;
            let row = &mut gw[c];
            for &(f, v) in x {
                row[f] += residual * v * inv_n;
            }
        }
    }
    (gw, gb)
}

/// Analytic gradient of [`objective`] with respect to (W, b).
pub fn gradient(
    weights: &[Vec<f64>],
    bias: &[f64],
    xs: &[SparseVector],
    ys: &[usize],
    l2_lambda: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (mut gw, gb) = data_gradient(weights, bias, xs, ys);
    for (grow, wrow) in gw.iter_mut().zip(weights) {
        for (g, w) in grow.iter_mut().zip(wrow) {
            *g += l2_lambda * w;
        }
    }
    (gw, gb)
}

/// Full-batch gradient descent on the L2-regularized softmax cross-entropy.
///
/// The ridge term is applied as a proximal step,
/// `W ← (W − lr·∇data) / (1 + lr·λ)`, which has the same fixed point as plain
/// gradient descent and stays stable for any λ. Training stops once the full
/// gradient's ∞-norm falls below `tol` or after `max_iters` updates.
pub fn fit_logreg(
    xs: &[SparseVector],
    ys: &[usize],
    num_features: usize,
    class_names: Vec<String>,
    params: LogRegParams,
) -> Result<LogRegModel> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    if !(params.l2_lambda >= 0.0 && params.lr > 0.0 && params.tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid regression parameters {params:?}"
        )));
    }
    let classes = class_names.len();
    if let Some(&bad) = ys.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    if let Some(&(f, _)) = xs.iter().flatten().find(|(f, _)| *f >= num_features) {
        return Err(Error::InvalidArgument(format!(
            "feature {f} outside width {num_features}"
        )));
    }
    let distinct: HashSet<usize> = ys.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} distinct class(es) among {} samples",
            distinct.len(),
            ys.len()
        )));
    }

    let mut weights = vec![vec![0.0; num_features]; classes];
    let mut bias = vec![0.0; classes];
    let shrink = 1.0 / (1.0 + params.lr * params.l2_lambda);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        let (gw, gb) = data_gradient(&weights, &bias, xs, ys);
        let mut max_grad = gb.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (grow, wrow) in gw.iter().zip(&weights) {
            for (g, w) in grow.iter().zip(wrow) {
                max_grad = max_grad.max((g + params.l2_lambda * w).abs());
            }
        }
        if max_grad < params.tol {
            converged = true;
            break;
        }
        for (wrow, grow) in weights.iter_mut().zip(&gw) {
            for (w, g) in wrow.iter_mut().zip(grow) {
                *w = (*w - params.lr * g) * shrink;
            }
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= params.lr * g;
        }
        iterations += 1;
    }
    Ok(LogRegModel {
        weights,
        bias,
        class_names,
        l2_lambda: params.l2_lambda,
        trained_iterations: iterations,
        converged,
    })
}

impl LogRegModel {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn num_features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// softmax(Wx + b)
    pub fn predict_proba(&self, x: &SparseVector) -> Vec<f64> {
        softmax(&logits(&self.weights, &self.bias, x))
    }

    pub fn predict(&self, x: &SparseVector) -> usize {
        argmax(&self.predict_proba(x))
    }
}

/// Ranks features of one weight row: descending weight, ties by name.
pub(crate) fn rank_features<'a>(
    row: &[f64],
    name: impl Fn(usize) -> &'a str,
    keep: impl Fn(f64) -> bool,
) -> Vec<(String, f64)> {
    let mut ranked: Vec<(usize, f64)> = row
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, w)| keep(w))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| name(a.0).cmp(name(b.0)))
    });
    ranked
        .into_iter()
        .map(|(f, w)| (name(f).to_owned(), w))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlassBoxOptions {
    pub tfidf: TfIdfOptions,
    pub regression: LogRegParams,
}

/// Tf-idf + logistic-regression classifier, explainable by design.
#[derive(Debug, Clone, PartialEq)]
pub struct GlassBox {
    pub vectorizer: TfIdfVectorizer,
    pub model: LogRegModel,
    pub options: GlassBoxOptions,
    /// Fingerprint of the training corpus, hex.
    pub corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlassBoxFile {
    class_names: Vec<String>,
    vocabulary_hash: String,
    corpus_hash: String,
    vocabulary: Vocabulary,
    idf: Vec<f64>,
    sublinear_tf: bool,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    hyperparameters: GlassBoxOptions,
    trained_iterations: usize,
    converged: bool,
}

impl GlassBox {
    pub fn train(corpus: &LabeledCorpus, options: GlassBoxOptions) -> Result<Self> {
        corpus.validate_labeled()?;
        let vectorizer = TfIdfVectorizer::fit(corpus, options.tfidf)?;
        let xs: Vec<SparseVector> = corpus
            .documents
            .iter()
            .map(|d| vectorizer.transform(d))
            .collect();
        let ys = corpus.labels().ok_or(Error::InconsistentLabeling)?;
        let model = fit_logreg(
            &xs,
            &ys,
            vectorizer.num_features(),
            corpus.class_names.clone(),
            options.regression,
        )?;
        Ok(GlassBox {
            vectorizer,
            model,
            options,
            corpus_hash: to_hex(corpus.fingerprint()),
        })
    }

    pub fn predict_proba_text(&self, text: &str) -> Vec<f64> {
        self.model
            .predict_proba(&self.vectorizer.transform_text(text))
    }

    pub fn accuracy(&self, corpus: &LabeledCorpus) -> f64 {
        let correct = corpus
            .documents
            .iter()
            .filter(|d| d.label == Some(self.model.predict(&self.vectorizer.transform(d))))
            .count();
        correct as f64 / corpus.len().max(1) as f64
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.model.class_names.iter().position(|c| c == name)
    }

    /// Features whose weight for `class` exceeds `threshold`, heaviest first,
    /// ties broken lexicographically.
    pub fn top_words(&self, class: usize, threshold: f64) -> Vec<(String, f64)> {
        rank_features(
            &self.model.weights[class],
            |f| self.vectorizer.feature_name(f),
            |w| w > threshold,
        )
    }

    /// Every feature of every class as `class,token,weight` rows, heaviest first per class.
    pub fn write_importance_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["class", "token", "weight"])?;
        for (c, name) in self.model.class_names.iter().enumerate() {
            for (token, weight) in self.top_words(c, f64::NEG_INFINITY) {
                writer.write_record([name.as_str(), token.as_str(), &weight.to_string()])?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GlassBoxFile {
            class_names: self.model.class_names.clone(),
            vocabulary_hash: to_hex(self.vectorizer.vocabulary.fingerprint()),
            corpus_hash: self.corpus_hash.clone(),
            vocabulary: self.vectorizer.vocabulary.clone(),
            idf: self.vectorizer.idf.clone(),
            sublinear_tf: self.vectorizer.sublinear_tf,
            weights: self.model.weights.clone(),
            bias: self.model.bias.clone(),
            hyperparameters: self.options,
            trained_iterations: self.model.trained_iterations,
            converged: self.model.converged,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: GlassBoxFile = serde_json::from_str(json)?;
        if to_hex(file.vocabulary.fingerprint()) != file.vocabulary_hash {
            return Err(Error::InvalidArgument(
                "glass-box vocabulary does not match its recorded hash".into(),
            ));
        }
        let width = file.vocabulary.len();
        if file.weights.len() != file.class_names.len()
            || file.bias.len() != file.class_names.len()
            || file.weights.iter().any(|row| row.len() != width)
        {
            return Err(Error::InvalidArgument(
                "glass-box weight shape does not match classes × vocabulary".into(),
            ));
        }
        let vectorizer = TfIdfVectorizer::from_parts(file.vocabulary, file.idf, file.sublinear_tf)?;
        Ok(GlassBox {
            vectorizer,
            model: LogRegModel {
                weights: file.weights,
                bias: file.bias,
                class_names: file.class_names,
                l2_lambda: file.hyperparameters.regression.l2_lambda,
                trained_iterations: file.trained_iterations,
                converged: file.converged,
            },
            options: file.hyperparameters,
            corpus_hash: file.corpus_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

impl ClassifierScorer for GlassBox {
    fn class_names(&self) -> &[String] {
        &self.model.class_names
    }

    fn score(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.predict_proba_text(text))
    }
}
