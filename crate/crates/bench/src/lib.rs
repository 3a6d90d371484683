//! Benchmark fixtures.

use coop_explain_core::glassbox::{GlassBoxOptions, SparseVector};
use coop_explain_core::lm::NGramOptions;
use coop_explain_core::synthetic::{PlantedConfig, PlantedCorpus};
use coop_explain_core::{GlassBox, NGramLm};

pub struct Fixture {
    pub planted: PlantedCorpus,
    pub glassbox: GlassBox,
    pub lm: NGramLm,
    /// Tf-idf rows of the planted corpus, in document order.
    pub features: Vec<SparseVector>,
    pub labels: Vec<usize>,
}

/// Planted corpus with `num_docs` documents and models trained on it.
pub fn fixture(num_docs: usize) -> Fixture {
    let planted = PlantedConfig {
        num_docs,
        ..PlantedConfig::default()
    }
    .generate()
    .expect("planted corpus");
    let glassbox = GlassBox::train(&planted.corpus, GlassBoxOptions::default()).expect("glass-box");
    let lm = NGramLm::fit(&planted.corpus, NGramOptions::default()).expect("lm");
    let features = planted
        .corpus
        .documents
        .iter()
        .map(|d| glassbox.vectorizer.transform(d))
        .collect();
    let labels = planted.corpus.labels().expect("labeled");
    Fixture {
        planted,
        glassbox,
        lm,
        features,
        labels,
    }
}
