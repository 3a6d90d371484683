//! Cooperative decoding: PUCT Monte Carlo tree search over token sequences.
//!
//! Each decoding step runs a fixed number of playouts from the current root.
//! A playout descends by maximal PUCT, expands the leaf it reaches with one
//! child per token the language model can emit (children carry the model's
//! probabilities as priors), completes the sequence by sampling from the
//! model, scores the finished text with the classifier and propagates that
//! score back to the root. One root child is then committed and becomes the
//! next root, keeping its subtree statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint_json, to_hex};
use crate::glassbox::ClassifierScorer;
use crate::lm::{sample_continuation_with, LanguageModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Exploitation value is the mean of back-propagated scores.
    Mean,
    /// Exploitation value is the best score seen below the node.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenChoice {
    HighestScore,
    MostPlayed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    pub c_puct: f64,
    pub playouts_per_token: usize,
    /// Maximum number of generated tokens, prompt included, EOS excluded.
    pub max_length: usize,
    pub rollout_max_tokens: usize,
    pub aggregation: Aggregation,
    pub token_choice: TokenChoice,
    pub rollout_temperature: f64,
    pub rng_seed: u64,
    /// Keep only the smallest set of children reaching this prior mass.
    pub prior_top_p: Option<f64>,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            c_puct: 3.0,
            playouts_per_token: 50,
            max_length: 40,
            rollout_max_tokens: 40,
            aggregation: Aggregation::Mean,
            token_choice: TokenChoice::HighestScore,
            rollout_temperature: 1.0,
            rng_seed: 0,
            prior_top_p: None,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.c_puct >= 0.0 && self.c_puct.is_finite()) {
            return bad(format!("c_puct must be >= 0, got {}", self.c_puct));
        }
        if self.playouts_per_token == 0 {
            return bad("playouts_per_token must be >= 1".into());
        }
        if self.max_length == 0 {
            return bad("max_length must be >= 1".into());
        }
        if !(self.rollout_temperature > 0.0 && self.rollout_temperature.is_finite()) {
            return bad(format!(
                "rollout_temperature must be > 0, got {}",
                self.rollout_temperature
            ));
        }
        if let Some(p) = self.prior_top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("prior_top_p must be in (0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// Hex fingerprint of the full configuration.
    pub fn hash(&self) -> String {
        to_hex(fingerprint_json(self))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MctsNode {
    pub token: TokenId,
    /// p(token | path) under the language model.
    pub prior: f64,
    pub visits: u64,
    pub score_sum: f64,
    pub score_max: f64,
    pub terminal: bool,
    children: Option<Range<usize>>,
}

impl MctsNode {
    fn new(token: TokenId, prior: f64, terminal: bool) -> Self {
        MctsNode {
            token,
            prior,
            visits: 0,
            score_sum: 0.0,
            score_max: 0.0,
            terminal,
            children: None,
        }
    }

    pub fn is_expanded(&self) -> bool {
        self.children.is_some()
    }

    pub fn mean_score(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.score_sum / self.visits as f64
        }
    }

    /// Exploitation value; zero for an unvisited node.
    pub fn value(&self, aggregation: Aggregation) -> f64 {
        match aggregation {
            Aggregation::Mean => self.mean_score(),
            Aggregation::Max => self.score_max,
        }
    }
}

/// `value + c_puct · prior · √N / (1 + n)`, with value 0 when n = 0.
pub fn puct_score(
    node: &MctsNode,
    parent_visits: u64,
    c_puct: f64,
    aggregation: Aggregation,
) -> f64 {
    node.value(aggregation)
        + c_puct * node.prior * (parent_visits as f64).sqrt() / (1.0 + node.visits as f64)
}

/// Arena-backed search tree. Re-rooting only moves the root index, so the
/// committed child's subtree keeps its statistics.
#[derive(Debug, Clone)]
pub struct MctsTree {
    nodes: Vec<MctsNode>,
    root: usize,
    /// Tokens from the start of the sequence through the root's token.
    tokens: TokenSeq,
}

impl MctsTree {
    /// Creates a tree rooted at `prompt` and expands the root.
    pub fn new<L: LanguageModel + ?Sized>(
        lm: &L,
        prompt: &[TokenId],
        config: &MctsConfig,
    ) -> Result<Self> {
        let eos = lm.eos_id();
        if prompt.contains(&eos) {
            return Err(Error::InvalidArgument("prompt contains EOS".into()));
        }
        if prompt.len() >= config.max_length {
            return Err(Error::InvalidArgument(format!(
                "prompt length {} must be below max_length {}",
                prompt.len(),
                config.max_length
            )));
        }
        let root_token = prompt.last().copied().unwrap_or(TokenId::MAX);
        let mut tree = MctsTree {
            nodes: vec![MctsNode::new(root_token, 1.0, false)],
            root: 0,
            tokens: prompt.to_vec(),
        };
        tree.expand(lm, 0, prompt, config)?;
        Ok(tree)
    }

    pub fn root_id(&self) -> usize {
        self.root
    }

    pub fn root(&self) -> &MctsNode {
        &self.nodes[self.root]
    }

    pub fn node(&self, id: usize) -> &MctsNode {
        &self.nodes[id]
    }

    pub fn children(&self, id: usize) -> Range<usize> {
        self.nodes[id].children.clone().unwrap_or(0..0)
    }

    /// Sequence committed so far.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Number of nodes allocated, including detached ones.
    pub fn arena_len(&self) -> usize {
        self.nodes.len()
    }

    /// Sum of visit counts over the subtree rooted at `id`.
    pub fn subtree_visits(&self, id: usize) -> u64 {
        let mut total = 0;
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            total += self.nodes[n].visits;
            stack.extend(self.children(n));
        }
        total
    }

    /// Makes `child` (a child of the current root) the new root.
    pub fn reroot(&mut self, child: usize) -> Result<()> {
        if !self.children(self.root).contains(&child) {
            return Err(Error::InvalidArgument(format!(
                "node {child} is not a child of the root"
            )));
        }
        self.root = child;
        self.tokens.push(self.nodes[child].token);
        Ok(())
    }

    fn expand<L: LanguageModel + ?Sized>(
        &mut self,
        lm: &L,
        id: usize,
        context: &[TokenId],
        config: &MctsConfig,
    ) -> Result<()> {
        let mut dist = lm.next_token_dist(context)?;
        if let Some(top_p) = config.prior_top_p {
            truncate_top_p(&mut dist, top_p);
        }
        let eos = lm.eos_id();
        let start = self.nodes.len();
        for (token, &p) in dist.iter().enumerate() {
            if p > 0.0 {
                let token = token as TokenId;
                self.nodes.push(MctsNode::new(token, p, token == eos));
            }
        }
        self.nodes[id].children = Some(start..self.nodes.len());
        Ok(())
    }

    /// Child maximizing PUCT; ties go to the lowest token id (children are
    /// stored in id order, so the first maximum wins). The playout in
    /// progress is counted in the parent's visit total.
    fn select_child(&self, parent: usize, config: &MctsConfig) -> Option<usize> {
        let parent_visits = self.nodes[parent].visits + 1;
        let mut best: Option<(usize, f64)> = None;
        for c in self.children(parent) {
            let s = puct_score(
                &self.nodes[c],
                parent_visits,
                config.c_puct,
                config.aggregation,
            );
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Zeroes everything outside the smallest high-probability set with mass ≥ `top_p`
/// and renormalizes.
fn truncate_top_p(dist: &mut [f64], top_p: f64) {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (rank, &i) in order.iter().enumerate() {
        mass += dist[i];
        if mass >= top_p {
            keep = rank + 1;
            break;
        }
    }
    for &i in &order[keep..] {
        dist[i] = 0.0;
    }
    let total: f64 = dist.iter().sum();
    for p in dist.iter_mut() {
        *p /= total;
    }
}

fn class_score(scorer: &dyn ClassifierScorer, text: &str, class: usize) -> Result<f64> {
    let scores = scorer.score(text)?;
    let s = *scores.get(class).ok_or_else(|| {
        Error::Scorer(format!(
            "scorer returned {} scores, class {class} requested",
            scores.len()
        ))
    })?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Scorer(format!("score {s} outside [0, 1]")));
    }
    Ok(s)
}

/// One selection / expansion / simulation / back-propagation iteration.
///
/// Returns the score of the completed sequence. A scorer failure aborts the
/// playout before any statistic is updated.
pub fn run_playout<L, R>(
    tree: &mut MctsTree,
    lm: &L,
    scorer: &dyn ClassifierScorer,
    class: usize,
    config: &MctsConfig,
    rng: &mut R,
) -> Result<f64>
where
    L: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let eos = lm.eos_id();
    let mut path = vec![tree.root];
    let mut tokens = tree.tokens.clone();
    let mut node = tree.root;
    while tree.nodes[node].is_expanded() {
        match tree.select_child(node, config) {
            Some(child) => {
                node = child;
                path.push(node);
                tokens.push(tree.nodes[node].token);
            }
            None => break,
        }
    }

    let leaf = &tree.nodes[node];
    let length = tokens.iter().filter(|&&t| t != eos).count();
    let finished = leaf.terminal || length >= config.max_length;
    let completed = if finished || leaf.is_expanded() {
        tokens
    } else {
        tree.expand(lm, node, &tokens, config)?;
        let budget = config.rollout_max_tokens.min(config.max_length - length);
        sample_continuation_with(lm, &tokens, budget, config.rollout_temperature, rng)?
    };

    let text = lm.detokenize(&completed)?;
    let score = class_score(scorer, &text, class)?;
    for &id in &path {
        let n = &mut tree.nodes[id];
        n.visits += 1;
        n.score_sum += score;
        n.score_max = n.score_max.max(score);
    }
    Ok(score)
}

/// Picks the root child to commit according to `config.token_choice`.
pub fn decode_token(tree: &MctsTree, config: &MctsConfig) -> Result<usize> {
    let visited: Vec<usize> = tree
        .children(tree.root)
        .filter(|&c| tree.nodes[c].visits > 0)
        .collect();
    let mut best = *visited.first().ok_or(Error::BudgetTooSmall)?;
    for &c in &visited[1..] {
        let (a, b) = (&tree.nodes[c], &tree.nodes[best]);
        let better = match config.token_choice {
            TokenChoice::HighestScore => {
                let (va, vb) = (a.value(config.aggregation), b.value(config.aggregation));
                va > vb || (va == vb && a.visits > b.visits)
            }
            TokenChoice::MostPlayed => {
                a.visits > b.visits || (a.visits == b.visits && a.mean_score() > b.mean_score())
            }
        };
        // Children are in token-id order, so equal candidates keep the lower id.
        if better {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    /// Generated tokens, EOS included when it was chosen.
    pub tokens: TokenSeq,
    /// D(class | text)
    pub final_score: f64,
    pub class: usize,
    pub playout_count: usize,
    pub config: MctsConfig,
}

/// Decodes one sequence for `class`, one committed token per search.
///
/// Stops when EOS is committed or `max_length` tokens exist. Deterministic for
/// a given `config.rng_seed`.
pub fn generate<L: LanguageModel + ?Sized>(
    lm: &L,
    scorer: &dyn ClassifierScorer,
    class: usize,
    prompt: &[TokenId],
    config: &MctsConfig,
) -> Result<GenerationResult> {
    config.validate()?;
    if class >= scorer.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} outside {} scorer classes",
            scorer.num_classes()
        )));
    }
    let eos = lm.eos_id();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut tree = MctsTree::new(lm, prompt, config)?;
    let mut playouts = 0;
    while tree.tokens.len() < config.max_length {
        for _ in 0..config.playouts_per_token {
            run_playout(&mut tree, lm, scorer, class, config, &mut rng)?;
        }
        playouts += config.playouts_per_token;
        let chosen = decode_token(&tree, config)?;
        tree.reroot(chosen)?;
        if tree.nodes[chosen].token == eos {
            break;
        }
        if !tree.nodes[chosen].is_expanded() && tree.tokens.len() < config.max_length {
            let context = tree.tokens.clone();
            tree.expand(lm, chosen, &context, config)?;
        }
    }
    let text = lm.detokenize(&tree.tokens)?;
    let final_score = class_score(scorer, &text, class)?;
    Ok(GenerationResult {
        text,
        tokens: tree.tokens,
        final_score,
        class,
        playout_count: playouts,
        config: config.clone(),
    })
}

/// One line of a generated-samples JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedSample {
    pub text: String,
    /// Class name the text was generated for (or labeled with, for unguided samples).
    pub class: String,
    pub final_score: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_samples_jsonl<W: Write>(mut out: W, samples: &[GeneratedSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples_jsonl<R: BufRead>(reader: R) -> Result<Vec<GeneratedSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn save_samples(path: impl AsRef<Path>, samples: &[GeneratedSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_samples_jsonl(&mut out, samples)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<GeneratedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples_jsonl(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::test_models::ScriptedLm;

    #[test]
    fn puct_examples() {
        let mut n = MctsNode::new(0, 0.5, false);
        assert_eq!(puct_score(&n, 4, 1.0, Aggregation::Mean), 1.0);
        n.visits = 3;
        n.score_sum = 1.5;
        assert_eq!(puct_score(&n, 9, 0.0, Aggregation::Mean), 0.5);
        let mut m = MctsNode::new(0, 0.25, false);
        m.visits = 2;
        m.score_sum = 1.0;
        assert!((puct_score(&m, 9, 2.0, Aggregation::Mean) - 1.0).abs() < 1e-15);
        m.score_max = 0.75;
        assert!((puct_score(&m, 9, 2.0, Aggregation::Max) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn top_p_keeps_smallest_covering_set() {
        let mut d = vec![0.1, 0.5, 0.0, 0.3, 0.1];
        truncate_top_p(&mut d, 0.75);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[4], 0.0);
        assert!((d[1] - 0.625).abs() < 1e-12 && (d[3] - 0.375).abs() < 1e-12);
    }

    fn with_stats(tree: &mut MctsTree, child: usize, visits: u64, mean: f64) {
        let n = &mut tree.nodes[child];
        n.visits = visits;
        n.score_sum = mean * visits as f64;
        n.score_max = mean;
    }

    #[test]
    fn decode_rules() {
        let lm = ScriptedLm {
            vocab: 3,
            script: vec![],
        };
        // Uniform-ish priors: make a 3-child root by hand.
        let mut tree = MctsTree {
            nodes: vec![
                MctsNode::new(TokenId::MAX, 1.0, false),
                MctsNode::new(0, 0.4, false),
                MctsNode::new(1, 0.4, false),
                MctsNode::new(2, 0.2, true),
            ],
            root: 0,
            tokens: vec![],
        };
        tree.nodes[0].children = Some(1..4);
        let mut cfg = MctsConfig::default();
        assert!(matches!(
            decode_token(&tree, &cfg),
            Err(Error::BudgetTooSmall)
        ));

        with_stats(&mut tree, 2, 1, 0.2);
        for choice in [TokenChoice::HighestScore, TokenChoice::MostPlayed] {
            cfg.token_choice = choice;
            assert_eq!(decode_token(&tree, &cfg).unwrap(), 2);
        }

        with_stats(&mut tree, 1, 10, 0.3);
        with_stats(&mut tree, 2, 2, 0.9);
        cfg.token_choice = TokenChoice::MostPlayed;
        assert_eq!(decode_token(&tree, &cfg).unwrap(), 1);
        cfg.token_choice = TokenChoice::HighestScore;
        assert_eq!(decode_token(&tree, &cfg).unwrap(), 2);

        // equal means: more visits wins, then lower token id
        with_stats(&mut tree, 1, 5, 0.5);
        with_stats(&mut tree, 2, 3, 0.5);
        assert_eq!(decode_token(&tree, &cfg).unwrap(), 1);
        with_stats(&mut tree, 2, 5, 0.5);
        assert_eq!(decode_token(&tree, &cfg).unwrap(), 1);
        cfg.token_choice = TokenChoice::MostPlayed;
        with_stats(&mut tree, 2, 5, 0.6);
        assert_eq!(decode_token(&tree, &cfg).unwrap(), 2);
        let _ = lm;
    }

    #[test]
    fn config_validation() {
        assert!(MctsConfig::default().validate().is_ok());
        for bad in [
            MctsConfig {
                playouts_per_token: 0,
                ..MctsConfig::default()
            },
            MctsConfig {
                c_puct: -1.0,
                ..MctsConfig::default()
            },
            MctsConfig {
                rollout_temperature: 0.0,
                ..MctsConfig::default()
            },
            MctsConfig {
                prior_top_p: Some(1.5),
                ..MctsConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn samples_jsonl_round_trip() {
        let samples = vec![GeneratedSample {
            text: "a b".into(),
            class: "pos".into(),
            final_score: 0.75,
            seed: 42,
            config_hash: "00ff".into(),
        }];
        let mut buf = Vec::new();
        write_samples_jsonl(&mut buf, &samples).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"text\":\"a b\",\"class\":\"pos\",\"final_score\":0.75,\"seed\":42,\"config_hash\":\"00ff\"}\n"
        );
        assert_eq!(read_samples_jsonl(buf.as_slice()).unwrap(), samples);
    }
}
