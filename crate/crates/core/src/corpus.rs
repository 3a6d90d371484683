//! Text normalization, unigram tokenization, vocabularies and JSONL corpus I/O.
//!
//! One normalization rule is shared by every component: lowercase, then split
//! on any maximal run of non-alphanumeric characters. The language model, the
//! glass-box and the explainer therefore always agree on what a word is.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

/// Lowercase and split on non-alphanumeric runs. Empty pieces are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Closed vocabulary over normalized tokens.
///
/// Regular tokens occupy ids `0..len()`, ordered by descending corpus count
/// with lexicographic tie-breaking. The three special ids follow:
/// `BOS = len()`, `EOS = len() + 1`, `UNK = len() + 2`. Keeping the regular
/// ids dense from zero lets them double as feature indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    min_count: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(repr: VocabularyRepr) -> Self {
        Vocabulary::from_ordered_tokens(repr.tokens, repr.min_count)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(vocab: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: vocab.id_to_token,
            min_count: vocab.min_count,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from already-ordered, distinct tokens.
    pub fn from_ordered_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
            min_count,
        }
    }

    /// Counts tokens over `token_lists` and keeps those seen at least `min_count` times.
    pub fn from_token_lists<'a, I>(token_lists: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be >= 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for tokens in token_lists {
            any = true;
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_ordered_tokens(
            kept.into_iter().map(|(t, _)| t.to_owned()).collect(),
            min_count,
        ))
    }

    /// Number of regular (non-special) tokens.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Size of the full id space, specials included.
    pub fn id_space(&self) -> usize {
        self.len() + 3
    }

    pub fn bos(&self) -> TokenId {
        self.len() as TokenId
    }

    pub fn eos(&self) -> TokenId {
        self.len() as TokenId + 1
    }

    pub fn unk(&self) -> TokenId {
        self.len() as TokenId + 2
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id as usize >= self.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Token string for `id`; specials render as `<bos>`, `<eos>`, `<unk>`.
    pub fn token(&self, id: TokenId) -> &str {
        match (id as usize).checked_sub(self.len()) {
            None => &self.id_to_token[id as usize],
            Some(0) => "<bos>",
            Some(1) => "<eos>",
            Some(_) => "<unk>",
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Normalizes and maps `text` to ids, unknown words becoming UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        self.encode_tokens(&tokenize(text))
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> TokenSeq {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Joins regular tokens with single spaces. Specials are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| !self.is_special(id))
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.id_to_token.join("\n").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub text: String,
    /// Normalized unigrams of `text`.
    pub tokens: Vec<String>,
    pub label: Option<usize>,
}

impl Document {
    pub fn new(text: impl Into<String>, label: Option<usize>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Document {
            text,
            tokens,
            label,
        }
    }
}

/// Documents plus the ordered class names their labels index into.
///
/// Loading tolerates a fully unlabeled file (empty `class_names`) so the same
/// type can carry language-model training text; [`LabeledCorpus::validate_labeled`]
/// enforces the classification invariants.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCorpus {
    pub documents: Vec<Document>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl LabeledCorpus {
    pub fn new(documents: Vec<Document>, class_names: Vec<String>) -> Self {
        LabeledCorpus {
            documents,
            class_names,
        }
    }

    /// Builds a corpus from `(text, label)` pairs; class names are the sorted label set.
    pub fn from_pairs<S, L>(pairs: impl IntoIterator<Item = (S, L)>) -> Self
    where
        S: Into<String>,
        L: Into<String>,
    {
        let pairs: Vec<(String, String)> = pairs
            .into_iter()
            .map(|(s, l)| (s.into(), l.into()))
            .collect();
        let class_names: Vec<String> = pairs
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let documents = pairs
            .into_iter()
            .map(|(text, label)| {
                let idx = class_names.binary_search(&label).unwrap();
                Document::new(text, Some(idx))
            })
            .collect();
        LabeledCorpus {
            documents,
            class_names,
        }
    }

    /// Unlabeled corpus, e.g. for language-model training.
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        LabeledCorpus {
            documents: texts.into_iter().map(|t| Document::new(t, None)).collect(),
            class_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for d in &self.documents {
            if let Some(l) = d.label {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Every document labeled, labels in range, ≥ 2 classes, ≥ 1 document per class.
    pub fn validate_labeled(&self) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if self.class_names.len() < 2 {
            return Err(Error::InvalidCorpus(format!(
                "need at least 2 classes, found {}",
                self.class_names.len()
            )));
        }
        for (i, d) in self.documents.iter().enumerate() {
            match d.label {
                None => return Err(Error::InconsistentLabeling),
                Some(l) if l >= self.class_names.len() => {
                    return Err(Error::InvalidCorpus(format!(
                        "document {i} has label {l} outside {} classes",
                        self.class_names.len()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(c) = self.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::InvalidCorpus(format!(
                "class {:?} has no documents",
                self.class_names[c]
            )));
        }
        Ok(())
    }

    /// Stable content hash over texts and label names.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        fingerprint(&buf)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.documents {
            let line = CorpusLine {
                text: d.text.clone(),
                label: d.label.map(|l| self.class_names[l].clone()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries: Vec<(String, Option<String>)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push((parsed.text, parsed.label));
        }
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let labeled = entries.iter().filter(|(_, l)| l.is_some()).count();
        if labeled != 0 && labeled != entries.len() {
            return Err(Error::InconsistentLabeling);
        }
        if labeled == 0 {
            return Ok(Self::from_texts(entries.into_iter().map(|(t, _)| t)));
        }
        Ok(Self::from_pairs(
            entries.into_iter().map(|(t, l)| (t, l.unwrap())),
        ))
    }
}

/// Reads a JSONL corpus: one `{"text": .., "label": ..}` object per line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    LabeledCorpus::read_jsonl(BufReader::new(file))
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &LabeledCorpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    corpus.write_jsonl(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Vocabulary over every token of `corpus` occurring at least `min_count` times.
pub fn build_vocabulary(corpus: &LabeledCorpus, min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Vocabulary::from_token_lists(
        corpus.documents.iter().map(|d| d.tokens.as_slice()),
        min_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Great game!"), strs(&["great", "game"]));
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("don't stop... Don't"),
            strs(&["don", "t", "stop", "don", "t"])
        );
        assert_eq!(tokenize("  --  "), Vec::<String>::new());
        assert_eq!(tokenize("Café 42x"), strs(&["café", "42x"]));
    }

    #[test]
    fn vocabulary_orders_by_count() {
        let corpus = LabeledCorpus::from_texts(["a b", "a"]);
        let v = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v.tokens(), &strs(&["a", "b"]));
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        let specials = [v.bos(), v.eos(), v.unk()];
        assert_eq!(specials.iter().collect::<BTreeSet<_>>().len(), 3);
        assert!(specials.iter().all(|&s| v.is_special(s)));
    }

    #[test]
    fn vocabulary_min_count_threshold() {
        let corpus = LabeledCorpus::from_texts(["a b", "a"]);
        let v = build_vocabulary(&corpus, 2).unwrap();
        assert_eq!(v.tokens(), &strs(&["a"]));
        assert_eq!(v.encode("b a"), vec![v.unk(), v.id("a").unwrap()]);
    }

    #[test]
    fn vocabulary_matches_brute_force_counter() {
        let corpus = LabeledCorpus::from_texts([
            "the cat sat on the mat",
            "The dog, the cat!",
            "a mat a dog a bird",
        ]);
        let v = build_vocabulary(&corpus, 1).unwrap();

        // Oracle: count by linear scan over every (doc, token) pair, then sort.
        let all: Vec<String> = corpus
            .documents
            .iter()
            .flat_map(|d| d.tokens.clone())
            .collect();
        let mut distinct: Vec<String> = all.clone();
        distinct.sort();
        distinct.dedup();
        let mut expected: Vec<(usize, String)> = distinct
            .into_iter()
            .map(|t| (all.iter().filter(|x| **x == t).count(), t))
            .collect();
        expected.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<String> = expected.into_iter().map(|(_, t)| t).collect();
        assert_eq!(v.tokens(), expected.as_slice());
        assert_eq!(v.tokens()[..3], strs(&["the", "a", "cat"])[..]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            build_vocabulary(&LabeledCorpus::default(), 1),
            Err(Error::EmptyCorpus)
        ));
        let c = LabeledCorpus::from_texts(["x"]);
        assert!(matches!(
            build_vocabulary(&c, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn load_sorted_class_names() {
        let data = "{\"text\":\"x y\",\"label\":\"pos\"}\n{\"text\":\"z\",\"label\":\"neg\"}\n";
        let c = LabeledCorpus::read_jsonl(data.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.class_names, strs(&["neg", "pos"]));
        assert_eq!(c.documents[0].label, Some(1));
        assert_eq!(c.documents[0].tokens, strs(&["x", "y"]));
        c.validate_labeled().unwrap();
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            LabeledCorpus::read_jsonl("".as_bytes()),
            Err(Error::EmptyCorpus)
        ));
        let truncated = "{\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"text\":\"c\n";
        match LabeledCorpus::read_jsonl(truncated.as_bytes()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed line error, got {other:?}"),
        }
        let mixed = "{\"text\":\"a\",\"label\":\"x\"}\n{\"text\":\"b\"}\n";
        let err = LabeledCorpus::read_jsonl(mixed.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "inconsistent labeling");
    }

    #[test]
    fn validate_labeled_requires_two_classes() {
        let c = LabeledCorpus::from_pairs([("a", "x"), ("b", "x")]);
        assert!(c.validate_labeled().is_err());
        let unlabeled = LabeledCorpus::from_texts(["a", "b"]);
        assert!(unlabeled.validate_labeled().is_err());
    }

    #[test]
    fn save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = LabeledCorpus::from_pairs([("Hello \"world\"", "b"), ("ünï cödé", "a")]);
        save_corpus(&path, &c).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.ends_with('\n'));
        assert_eq!(load_corpus(&path).unwrap(), c);
        assert!(matches!(
            load_corpus(dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "\\PC{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn vocabulary_is_deterministic_and_bijective(
            docs in proptest::collection::vec("[a-e ]{0,12}", 1..8),
            min_count in 1usize..3,
        ) {
            let corpus = LabeledCorpus::from_texts(docs.clone());
            let v1 = build_vocabulary(&corpus, min_count).unwrap();
            let v2 = build_vocabulary(&LabeledCorpus::from_texts(docs), min_count).unwrap();
            prop_assert_eq!(&v1, &v2);
            for (i, t) in v1.tokens().iter().enumerate() {
                prop_assert_eq!(v1.id(t), Some(i as TokenId));
                prop_assert_eq!(v1.token(i as TokenId), t.as_str());
            }
        }

        #[test]
        fn jsonl_round_trip(
            rows in proptest::collection::vec(("\\PC{0,20}", 0usize..3), 1..10),
        ) {
            let names = ["alpha", "beta", "gamma"];
            let c = LabeledCorpus::from_pairs(rows.iter().map(|(t, l)| (t.clone(), names[*l])));
            let mut buf = Vec::new();
            c.write_jsonl(&mut buf).unwrap();
            prop_assert_eq!(LabeledCorpus::read_jsonl(buf.as_slice()).unwrap(), c);
        }
    }
}
