//! One function per subcommand. Each returns the rows of its summary table.

use std::path::{Path, PathBuf};
use std::time::Duration;

use coop_explain_core::corpus::load_corpus;
use coop_explain_core::evaluation::{evaluate, sweep_num_texts, SweepPoint};
use coop_explain_core::explainer::{explain_generated, generate_corpus, GeneratedCorpus};
use coop_explain_core::fingerprint::{fingerprint, to_hex};
use coop_explain_core::lm::{LmBridgeClient, BRIDGE_ENV};
use coop_explain_core::mcts::{load_samples, write_samples_jsonl, GeneratedSample};
use coop_explain_core::{
    ClassifierScorer, EvalReport, Explanation, GlassBox, ImportanceMap, LabeledCorpus,
    LanguageModel, NGramLm,
};

use crate::artifacts::{read_envelope, OutputDir};
use crate::config::RunConfig;
use crate::failure::Failure;

pub type Rows = Vec<(String, String)>;

/// Input locations that default to files inside the output directory.
#[derive(Debug, Default, Clone)]
pub struct Inputs {
    pub lm: Option<PathBuf>,
    pub glassbox: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub explanation: Option<PathBuf>,
}

pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub workers: usize,
    pub force: bool,
    pub inputs: Inputs,
}

const LM_FILE: &str = "lm.json";
const GLASSBOX_FILE: &str = "glassbox.json";
const SAMPLES_FILE: &str = "samples.jsonl";
const EXPLANATION_CSV: &str = "explanation.csv";
const EXPLANATION_JSON: &str = "explanation.json";

fn row(key: &str, value: impl ToString) -> (String, String) {
    (key.to_owned(), value.to_string())
}

impl Context {
    fn out_path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_path(default))
    }

    fn train_corpus(&self) -> Result<LabeledCorpus, Failure> {
        let section = &self.config.corpus;
        if let Some(path) = &section.train {
            return Ok(load_corpus(path)?);
        }
        if let Some(planted) = &section.planted {
            return Ok(planted.generate()?.corpus);
        }
        Err(Failure::config(
            "config_invalid",
            "set corpus.train or corpus.planted",
        ))
    }

    fn lm_corpus(&self) -> Result<LabeledCorpus, Failure> {
        match &self.config.corpus.lm_train {
            Some(path) => Ok(load_corpus(path)?),
            None => self.train_corpus(),
        }
    }

    fn eval_corpus(&self) -> Result<LabeledCorpus, Failure> {
        match &self.config.corpus.eval {
            Some(path) => Ok(load_corpus(path)?),
            None => self.train_corpus(),
        }
    }

    fn bridge_endpoint(&self) -> Option<String> {
        std::env::var(BRIDGE_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .or_else(|| self.config.lm.bridge.clone())
    }

    /// The bridge when one is configured, otherwise the trained n-gram model.
    fn language_model(&self) -> Result<(Box<dyn LanguageModel>, String), Failure> {
        if let Some(endpoint) = self.bridge_endpoint() {
            let timeout = Duration::from_secs_f64(self.config.lm.bridge_timeout_secs);
            let client = LmBridgeClient::connect(&endpoint, timeout)?;
            let name = format!("bridge ({})", client.meta().model_name);
            return Ok((Box::new(client), name));
        }
        let path = self.input(&self.inputs.lm, LM_FILE);
        let env = read_envelope::<NGramLm>(&path, "ngram_lm").map_err(|f| hint(f, "train-lm"))?;
        Ok((Box::new(env.body), format!("ngram ({})", path.display())))
    }

    fn glassbox(&self) -> Result<GlassBox, Failure> {
        let path = self.input(&self.inputs.glassbox, GLASSBOX_FILE);
        let env = read_envelope::<serde_json::Value>(&path, "glassbox")
            .map_err(|f| hint(f, "train-glassbox"))?;
        Ok(GlassBox::from_json(&env.body.to_string())?)
    }

    fn fresh_samples(
        &self,
        gb: &GlassBox,
        lm: &dyn LanguageModel,
        out: &mut OutputDir,
    ) -> Result<GeneratedCorpus, Failure> {
        let config = self.config.explainer_config(self.workers);
        let mut generated = generate_corpus(lm, gb, &config)?;
        for s in &mut generated.samples {
            s.config_hash = self.hash.clone();
        }
        let mut jsonl = Vec::new();
        write_samples_jsonl(&mut jsonl, &generated.samples)?;
        out.write_bytes(SAMPLES_FILE, &jsonl)?;
        Ok(generated)
    }
}

fn hint(mut f: Failure, command: &str) -> Failure {
    if f.code == "missing_artifact" {
        f.message
            .push_str(&format!(" (run `coop-explain {command}` first)"));
    }
    f
}

pub fn train_lm(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let corpus = ctx.lm_corpus()?;
    let lm = NGramLm::fit(&corpus, ctx.config.lm.ngram)?;
    let corpus_hash = to_hex(corpus.fingerprint());
    out.write_envelope(LM_FILE, "ngram_lm", Some(corpus_hash.clone()), &lm)?;
    Ok(vec![
        row("documents", corpus.len()),
        row("vocabulary", lm.vocabulary().len()),
        row("order", lm.order()),
        row("contexts", lm.num_contexts()),
        row("corpus hash", corpus_hash),
    ])
}

pub fn train_glassbox(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let corpus = ctx.train_corpus()?;
    let gb = GlassBox::train(&corpus, ctx.config.glassbox)?;
    let body: serde_json::Value = serde_json::from_str(&gb.to_json()?)?;
    out.write_envelope(
        GLASSBOX_FILE,
        "glassbox",
        Some(gb.corpus_hash.clone()),
        body,
    )?;
    let mut csv = Vec::new();
    gb.write_importance_csv(&mut csv)?;
    out.write_bytes("glassbox_importance.csv", &csv)?;
    let mut rows = vec![
        row("documents", corpus.len()),
        row("classes", gb.class_names().join(", ")),
        row("features", gb.vectorizer.num_features()),
        row("train accuracy", format!("{:.4}", gb.accuracy(&corpus))),
    ];
    for (c, name) in gb.class_names().iter().enumerate() {
        let top: Vec<String> = gb
            .top_words(c, f64::NEG_INFINITY)
            .into_iter()
            .take(5)
            .map(|(w, _)| w)
            .collect();
        rows.push(row(&format!("top words {name}"), top.join(" ")));
    }
    rows.push(row("corpus hash", &gb.corpus_hash));
    Ok(rows)
}

fn sample_rows(generated: &GeneratedCorpus) -> Rows {
    let mut rows = vec![row("texts", generated.samples.len())];
    for (class, count) in generated.class_frequencies() {
        let scores: Vec<f64> = generated
            .samples
            .iter()
            .filter(|s| s.class == class)
            .map(|s| s.final_score)
            .collect();
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        rows.push(row(
            &format!("class {class}"),
            format!("{count} texts, mean score {mean:.3}"),
        ));
    }
    for w in &generated.warnings {
        rows.push(row("warning", w));
    }
    rows
}

pub fn generate(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let gb = ctx.glassbox()?;
    let (lm, lm_name) = ctx.language_model()?;
    let generated = ctx.fresh_samples(&gb, lm.as_ref(), out)?;
    let mut rows = vec![
        row("language model", lm_name),
        row("mode", ctx.config.explainer.mode.as_str()),
    ];
    rows.extend(sample_rows(&generated));
    Ok(rows)
}

/// Fits on `--samples` when given, otherwise generates first.
pub fn explain(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let gb = ctx.glassbox()?;
    let generated = match &ctx.inputs.samples {
        Some(path) => GeneratedCorpus {
            class_names: gb.class_names().to_vec(),
            samples: load_samples(path)?,
            warnings: Vec::new(),
        },
        None => {
            let (lm, _) = ctx.language_model()?;
            ctx.fresh_samples(&gb, lm.as_ref(), out)?
        }
    };
    let config = ctx.config.explainer_config(ctx.workers);
    let mut explanation = explain_generated(&generated, &config)?;
    explanation.metadata.config_hash = ctx.hash.clone();
    explanation.metadata.scorer_corpus_hash = Some(gb.corpus_hash.clone());
    let mut json = serde_json::to_string_pretty(&explanation)?;
    json.push('\n');
    out.write_bytes(EXPLANATION_JSON, json.as_bytes())?;
    out.write_bytes(EXPLANATION_CSV, explanation.to_csv_string()?.as_bytes())?;

    let mut rows = vec![row("mode", ctx.config.explainer.mode.as_str())];
    rows.extend(sample_rows(&generated));
    for c in &explanation.classes {
        let top: Vec<&str> = c.words.iter().take(5).map(|(w, _)| w.as_str()).collect();
        rows.push(row(&format!("top words {}", c.class), top.join(" ")));
    }
    Ok(rows)
}

/// The sibling `.json` of an explanation CSV, when it exists.
fn companion_json(csv: &Path) -> Option<Explanation> {
    let json = csv.with_extension("json");
    json.exists()
        .then(|| Explanation::load_json(&json).ok())
        .flatten()
}

pub fn evaluate_cmd(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let gb = ctx.glassbox()?;
    let path = ctx.input(&ctx.inputs.explanation, EXPLANATION_CSV);
    let bytes = std::fs::read(&path).map_err(|e| {
        hint(
            Failure::new("missing_artifact", format!("{}: {e}", path.display())),
            "explain",
        )
    })?;
    let mut map = ImportanceMap::read_csv(bytes.as_slice(), "external")?;
    if let Some(meta) = companion_json(&path).map(|e| e.metadata) {
        map.source = meta.method.clone();
        if let Some(h) = &meta.scorer_corpus_hash {
            if *h != gb.corpus_hash && !ctx.force {
                return Err(Failure::new(
                    "corpus_hash_mismatch",
                    format!(
                        "explanation was produced against glass-box corpus {h}, loaded glass-box has {}; pass --force to continue",
                        gb.corpus_hash
                    ),
                ));
            }
        }
    }
    let texts = ctx.eval_corpus()?;
    let mut report: EvalReport = evaluate(&map, &gb, &texts.documents, &ctx.config.eval)?;
    report.explanation_hash = Some(to_hex(fingerprint(&bytes)));

    out.write_envelope(
        "report.json",
        "eval_report",
        Some(gb.corpus_hash.clone()),
        &report,
    )?;
    let mut pr = Vec::new();
    report.write_pr_csv(&mut pr)?;
    out.write_bytes("pr_curve.csv", &pr)?;
    let mut flips = Vec::new();
    report.write_flip_csv(&mut flips)?;
    out.write_bytes("flip_curve.csv", &flips)?;

    let mut rows = vec![row(
        "explanation",
        format!("{} ({})", path.display(), report.source),
    )];
    for c in &report.classes {
        let value = match (&c.spearman, &c.spearman_error) {
            (Some(s), _) => format!("rho {:.3}, p {:.2e}, n {}", s.rho, s.p_value, s.n),
            (None, Some(e)) => e.clone(),
            (None, None) => "n/a".into(),
        };
        rows.push(row(&format!("spearman {}", c.class), value));
    }
    if let Some(m) = report.mean_rho() {
        rows.push(row("mean rho", format!("{m:.3}")));
    }
    if let Some(p) = report
        .mean_pr_curve
        .iter()
        .find(|p| p.k == 20)
        .or(report.mean_pr_curve.first())
    {
        rows.push(row(
            &format!("precision/recall @{}", p.k),
            format!("{:.3} / {:.3}", p.precision, p.recall),
        ));
    }
    let flip = |r: usize| {
        report
            .flip_curve
            .iter()
            .find(|f| f.replacements == r)
            .map(|f| f.flip_rate)
    };
    for r in [1, 5, 10] {
        if let Some(rate) = flip(r) {
            rows.push(row(&format!("flip rate @{r}"), format!("{rate:.3}")));
        }
    }
    rows.push(row("texts evaluated", report.texts_evaluated));
    Ok(rows)
}

pub fn sweep(ctx: &Context, out: &mut OutputDir) -> Result<Rows, Failure> {
    let gb = ctx.glassbox()?;
    let (lm, _) = ctx.language_model()?;
    let eval = &ctx.config.eval;
    let config = ctx.config.explainer_config(1);
    let points: Vec<SweepPoint> = sweep_num_texts(
        lm.as_ref(),
        &gb,
        &eval.sweep_sizes,
        &eval.sweep_seeds,
        &config,
        eval.threshold,
    )?;
    out.write_envelope("sweep.json", "sweep", Some(gb.corpus_hash.clone()), &points)?;
    let mut csv = String::from("size,mean_rho,mean_p_value\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.size, p.mean_rho, p.mean_p_value));
    }
    out.write_bytes("sweep.csv", csv.as_bytes())?;
    Ok(points
        .iter()
        .map(|p| {
            row(
                &format!("texts per class {}", p.size),
                format!("rho {:.3}, p {:.2e}", p.mean_rho, p.mean_p_value),
            )
        })
        .collect())
}

/// Top-20 words and the two best-scoring texts per class.
pub fn dump_samples(ctx: &Context) -> Result<String, Failure> {
    let csv = ctx.input(&ctx.inputs.explanation, EXPLANATION_CSV);
    let json = csv.with_extension("json");
    let explanation = Explanation::load_json(&json)
        .map_err(|e| hint(Failure::new("missing_artifact", e.to_string()), "explain"))?;
    let samples_path = ctx.input(&ctx.inputs.samples, SAMPLES_FILE);
    let samples: Vec<GeneratedSample> = load_samples(&samples_path)
        .map_err(|e| hint(Failure::new("missing_artifact", e.to_string()), "generate"))?;
    let mut text = String::new();
    for c in &explanation.classes {
        text.push_str(&format!("== {} ==\n", c.class));
        let top: Vec<String> = c
            .words
            .iter()
            .take(20)
            .map(|(w, x)| format!("{w} ({x:.3})"))
            .collect();
        text.push_str(&format!("top words: {}\n", top.join(", ")));
        let mut mine: Vec<&GeneratedSample> =
            samples.iter().filter(|s| s.class == c.class).collect();
        mine.sort_by(|a, b| {
            b.final_score
                .total_cmp(&a.final_score)
                .then_with(|| a.text.cmp(&b.text))
        });
        for s in mine.iter().take(2) {
            text.push_str(&format!("  [{:.3}] {}\n", s.final_score, s.text));
        }
    }
    Ok(text)
}
