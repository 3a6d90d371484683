//! Faithfulness metrics against a glass-box classifier.
//!
//! - Spearman correlation between the glass-box top words and the scores an
//!   explainer gives them, with a two-sided t-test p-value.
//! - Precision / recall of an explainer's top-k words against the glass-box
//!   top words.
//! - Insertion / deletion: replace a text's important words with a competing
//!   class's important words until the glass-box decision flips.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{tokenize, Document};
use crate::error::{Error, Result};
use crate::explainer::{explain_generated, ExplainerConfig, Explanation, GeneratedCorpus};
use crate::glassbox::{argmax, ClassifierScorer, GlassBox};

/// Per-class token → weight maps from any explainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub source: String,
    pub classes: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Deserialize)]
struct ImportanceRow {
    class: String,
    token: String,
    weight: f64,
}

impl ImportanceMap {
    pub fn new(source: impl Into<String>) -> Self {
        ImportanceMap {
            source: source.into(),
            classes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: &str, token: &str, weight: f64) -> Result<()> {
        if !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite weight {weight} for {class:?}/{token:?}"
            )));
        }
        self.classes
            .entry(class.to_owned())
            .or_default()
            .insert(token.to_owned(), weight);
        Ok(())
    }

    pub fn from_explanation(expl: &Explanation) -> Self {
        ImportanceMap {
            source: expl.metadata.method.clone(),
            classes: expl
                .classes
                .iter()
                .map(|c| (c.class.clone(), c.words.iter().cloned().collect()))
                .collect(),
        }
    }

    /// The glass-box's own weights, i.e. a perfect explainer.
    pub fn from_glassbox(gb: &GlassBox) -> Self {
        let classes = gb
            .model
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                (
                    name.clone(),
                    gb.top_words(c, f64::NEG_INFINITY).into_iter().collect(),
                )
            })
            .collect();
        ImportanceMap {
            source: "glassbox".into(),
            classes,
        }
    }

    /// Reads `class,token,weight` CSV (extra columns such as `rank` are ignored).
    pub fn read_csv<R: Read>(reader: R, source: impl Into<String>) -> Result<Self> {
        let mut map = ImportanceMap::new(source);
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        for row in rdr.deserialize() {
            let row: ImportanceRow = row?;
            map.insert(&row.class, &row.token, row.weight)?;
        }
        Ok(map)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, "external")
    }

    pub fn weight(&self, class: &str, token: &str) -> Option<f64> {
        self.classes.get(class).and_then(|m| m.get(token)).copied()
    }

    /// Tokens of `class`, heaviest first, ties lexicographic.
    pub fn ranked(&self, class: &str) -> Vec<(&str, f64)> {
        let mut words: Vec<(&str, f64)> = self
            .classes
            .get(class)
            .map(|m| m.iter().map(|(t, &w)| (t.as_str(), w)).collect())
            .unwrap_or_default();
        words.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(b.0))
        });
        words
    }
}

/// Average ranks (1-based), tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rho with a two-sided p-value from the t approximation with n − 2
/// degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("length mismatch".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::ReferenceSetTooSmall { found: n });
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    Ok((rho, rho_p_value(rho, n)))
}

pub fn rho_p_value(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

fn class_of(gb: &GlassBox, class: &str) -> Result<usize> {
    gb.class_index(class)
        .ok_or_else(|| Error::UnknownClass(class.to_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    /// Size of the glass-box reference set.
    pub n: usize,
}

/// Rank correlation between the glass-box top words of `class` (weight above
/// `threshold`) and the explainer's scores for them. Words the explainer does
/// not score count as 0.
pub fn spearman_vs_glassbox(
    expl: &ImportanceMap,
    gb: &GlassBox,
    class: &str,
    threshold: f64,
) -> Result<SpearmanResult> {
    let reference = gb.top_words(class_of(gb, class)?, threshold);
    if reference.len() < 3 {
        return Err(Error::ReferenceSetTooSmall {
            found: reference.len(),
        });
    }
    let gb_weights: Vec<f64> = reference.iter().map(|(_, w)| *w).collect();
    let expl_scores: Vec<f64> = reference
        .iter()
        .map(|(t, _)| expl.weight(class, t).unwrap_or(0.0))
        .collect();
    let (rho, p_value) = spearman(&gb_weights, &expl_scores)?;
    Ok(SpearmanResult {
        rho,
        p_value,
        n: reference.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

/// For each k: |top-k(expl) ∩ topset| / k and the same intersection / |topset|.
pub fn precision_recall_curve(
    expl: &ImportanceMap,
    gb: &GlassBox,
    class: &str,
    ks: &[usize],
    threshold: f64,
) -> Result<Vec<PrPoint>> {
    if ks.first() == Some(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "ks must be positive and strictly ascending".into(),
        ));
    }
    let topset: HashSet<String> = gb
        .top_words(class_of(gb, class)?, threshold)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    if topset.is_empty() {
        return Err(Error::ReferenceSetTooSmall { found: 0 });
    }
    let ranked = expl.ranked(class);
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranked
                .iter()
                .take(k)
                .filter(|(t, _)| topset.contains(*t))
                .count() as f64;
            PrPoint {
                k,
                precision: hits / k as f64,
                recall: hits / topset.len() as f64,
            }
        })
        .collect())
}

/// Outcome of the replacement procedure on one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementTrace {
    pub original_class: usize,
    pub replacements: usize,
    /// Replacement count at which the decision changed, if it did.
    pub flipped_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipPoint {
    pub replacements: usize,
    pub flip_rate: f64,
}

/// Runs the replacement loop on one text.
///
/// The original class is the scorer's argmax and the competing class its
/// runner-up. The explainer's top-`top_k` words of the original class are
/// visited in rank order; every occurrence of a visited word is replaced,
/// left to right, by the competing class's best explainer word (its second
/// best when that equals the removed word). The text is re-scored after each
/// replacement and the loop stops as soon as the argmax changes. Replaced
/// positions are never revisited.
pub fn replacement_trace(
    scorer: &dyn ClassifierScorer,
    text: &str,
    expl: &ImportanceMap,
    top_k: usize,
) -> Result<ReplacementTrace> {
    let mut tokens = tokenize(text);
    let scores = scorer.score(&tokens.join(" "))?;
    let original = argmax(&scores);
    let names = scorer.class_names();
    let trace = |replacements, flipped_at| ReplacementTrace {
        original_class: original,
        replacements,
        flipped_at,
    };
    if names.len() < 2 {
        return Ok(trace(0, None));
    }
    let runner_up = {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.into_iter().find(|&c| c != original).unwrap()
    };
    let removals = expl.ranked(&names[original]);
    let inserts = expl.ranked(&names[runner_up]);
    let mut replaced = vec![false; tokens.len()];
    let mut count = 0;
    for (word, _) in removals.into_iter().take(top_k) {
        let Some(&(insert, _)) = inserts.iter().find(|(w, _)| *w != word) else {
            continue;
        };
        for pos in 0..tokens.len() {
            if replaced[pos] || tokens[pos] != word {
                continue;
            }
            tokens[pos] = insert.to_owned();
            replaced[pos] = true;
            count += 1;
            if argmax(&scorer.score(&tokens.join(" "))?) != original {
                return Ok(trace(count, Some(count)));
            }
        }
    }
    Ok(trace(count, None))
}

/// Flip proportion per replacement budget r = 0..=R, where R is the largest
/// number of replacements any text went through.
pub fn flip_curve(traces: &[ReplacementTrace]) -> Vec<FlipPoint> {
    let max_r = traces.iter().map(|t| t.replacements).max().unwrap_or(0);
    let n = traces.len().max(1) as f64;
    (0..=max_r)
        .map(|r| FlipPoint {
            replacements: r,
            flip_rate: traces
                .iter()
                .filter(|t| t.flipped_at.is_some_and(|f| f <= r))
                .count() as f64
                / n,
        })
        .collect()
}

/// Insertion / deletion curve over the first `max_texts` texts.
pub fn insertion_deletion(
    scorer: &dyn ClassifierScorer,
    texts: &[Document],
    expl: &ImportanceMap,
    top_k: usize,
    max_texts: usize,
) -> Result<Vec<FlipPoint>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    let traces = texts
        .iter()
        .take(max_texts)
        .map(|d| replacement_trace(scorer, &d.text, expl, top_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(flip_curve(&traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub spearman: Option<SpearmanResult>,
    /// Set when the correlation could not be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_error: Option<String>,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Precision / recall averaged over classes.
    pub mean_pr_curve: Vec<PrPoint>,
    pub flip_curve: Vec<FlipPoint>,
    pub explanation_hash: Option<String>,
    pub glassbox_corpus_hash: String,
    pub texts_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Glass-box top-word cutoff.
    pub threshold: f64,
    pub ks: Vec<usize>,
    pub top_k: usize,
    pub max_texts: usize,
    pub sweep_sizes: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 1.0,
            ks: vec![10, 20, 50, 100, 200, 500, 1000, 1500],
            top_k: 250,
            max_texts: 1000,
            sweep_sizes: vec![50, 100, 200],
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

impl EvalReport {
    pub fn mean_rho(&self) -> Option<f64> {
        let rhos: Vec<f64> = self
            .classes
            .iter()
            .filter_map(|c| c.spearman.map(|s| s.rho))
            .collect();
        (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64)
    }

    pub fn write_pr_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "precision", "recall"])?;
        for p in &self.mean_pr_curve {
            w.write_record([
                p.k.to_string(),
                p.precision.to_string(),
                p.recall.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_flip_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replacements", "flip_rate"])?;
        for p in &self.flip_curve {
            w.write_record([p.replacements.to_string(), p.flip_rate.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every metric for every glass-box class.
pub fn evaluate(
    expl: &ImportanceMap,
    gb: &GlassBox,
    texts: &[Document],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut classes = Vec::new();
    for name in &gb.model.class_names {
        let (spearman, spearman_error) =
            match spearman_vs_glassbox(expl, gb, name, config.threshold) {
                Ok(s) => (Some(s), None),
                Err(e @ Error::ReferenceSetTooSmall { .. }) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
        let pr_curve = match precision_recall_curve(expl, gb, name, &config.ks, config.threshold) {
            Ok(curve) => curve,
            Err(Error::ReferenceSetTooSmall { .. }) => Vec::new(),
            Err(e) => return Err(e),
        };
        classes.push(ClassReport {
            class: name.clone(),
            spearman,
            spearman_error,
            pr_curve,
        });
    }
    let with_pr: Vec<&ClassReport> = classes.iter().filter(|c| !c.pr_curve.is_empty()).collect();
    let mean_pr_curve = config
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let n = with_pr.len().max(1) as f64;
            PrPoint {
                k,
                precision: with_pr.iter().map(|c| c.pr_curve[i].precision).sum::<f64>() / n,
                recall: with_pr.iter().map(|c| c.pr_curve[i].recall).sum::<f64>() / n,
            }
        })
        .collect();
    let flip_curve = insertion_deletion(gb, texts, expl, config.top_k, config.max_texts)?;
    Ok(EvalReport {
        source: expl.source.clone(),
        threshold: config.threshold,
        classes,
        mean_pr_curve,
        flip_curve,
        explanation_hash: None,
        glassbox_corpus_hash: gb.corpus_hash.clone(),
        texts_evaluated: texts.len().min(config.max_texts),
    })
}

/// Mean rho over classes with a valid reference set.
pub fn mean_rho_vs_glassbox(
    expl: &ImportanceMap,
    gb: &GlassBox,
    threshold: f64,
) -> Result<(f64, f64)> {
    let mut rhos = Vec::new();
    let mut ps = Vec::new();
    for name in &gb.model.class_names {
        let s = spearman_vs_glassbox(expl, gb, name, threshold)?;
        rhos.push(s.rho);
        ps.push(s.p_value);
    }
    let n = rhos.len() as f64;
    Ok((rhos.iter().sum::<f64>() / n, ps.iter().sum::<f64>() / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    /// Mean over classes and seeds.
    pub mean_rho: f64,
    pub mean_p_value: f64,
}

/// Fits explanations on the first `size` texts per class of each corpus and
/// averages rho over classes and corpora (one corpus per seed).
pub fn sweep_on_corpora(
    corpora: &[GeneratedCorpus],
    sizes: &[usize],
    gb: &GlassBox,
    config: &ExplainerConfig,
    threshold: f64,
) -> Result<Vec<SweepPoint>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sizes must be ascending".into()));
    }
    if corpora.is_empty() {
        return Err(Error::InvalidArgument("no corpora to sweep".into()));
    }
    sizes
        .iter()
        .map(|&size| {
            let mut rho = 0.0;
            let mut p = 0.0;
            for corpus in corpora {
                let cfg = ExplainerConfig {
                    texts_per_class: size,
                    ..config.clone()
                };
                let expl = explain_generated(&corpus.truncate_per_class(size)?, &cfg)?;
                let (r, pv) =
                    mean_rho_vs_glassbox(&ImportanceMap::from_explanation(&expl), gb, threshold)?;
                rho += r;
                p += pv;
            }
            let n = corpora.len() as f64;
            Ok(SweepPoint {
                size,
                mean_rho: rho / n,
                mean_p_value: p / n,
            })
        })
        .collect()
}

/// Generates one superset corpus per seed (the largest size per class) and
/// sweeps over `sizes` by truncation.
pub fn sweep_num_texts<L: crate::lm::LanguageModel + ?Sized>(
    lm: &L,
    gb: &GlassBox,
    sizes: &[usize],
    seeds: &[u64],
    config: &ExplainerConfig,
    threshold: f64,
) -> Result<Vec<SweepPoint>> {
    let largest = *sizes
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no sizes".into()))?;
    let corpora = seeds
        .iter()
        .map(|&seed| {
            let cfg = ExplainerConfig {
                texts_per_class: largest,
                seed,
                ..config.clone()
            };
            crate::explainer::generate_corpus(lm, gb, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    sweep_on_corpora(&corpora, sizes, gb, config, threshold)
}
