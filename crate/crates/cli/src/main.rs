//! `coop-explain`: train, generate, explain and evaluate from one JSON config.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artifacts::OutputDir;
use commands::{Context, Inputs, Rows};
use config::RunConfig;
use failure::Failure;

/// Global explanations of text classifiers by classifier-guided generation.
///
/// Config values can be overridden with dotted flags such as
/// `--mcts.c_puct=5` or `--corpus.planted.num_docs=500`.
#[derive(Debug, Parser)]
#[command(name = "coop-explain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Parallel generations for `generate` and `explain` (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Evaluate even when artifact corpus hashes disagree.
    #[arg(long, global = true)]
    force: bool,

    /// Trained n-gram model (default: <output_dir>/lm.json).
    #[arg(long, global = true)]
    lm: Option<PathBuf>,

    /// Trained glass-box (default: <output_dir>/glassbox.json).
    #[arg(long, global = true)]
    glassbox: Option<PathBuf>,

    /// Generated samples JSONL; `explain` fits on it instead of generating.
    #[arg(long, global = true)]
    samples: Option<PathBuf>,

    /// Explanation or importance CSV (default: <output_dir>/explanation.csv).
    #[arg(long, global = true)]
    explanation: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Fit the n-gram language model.
    TrainLm,
    /// Fit the tf-idf logistic-regression glass-box classifier.
    TrainGlassbox,
    /// Generate texts (guided or unguided, per `explainer.mode`).
    Generate,
    /// Generate texts and fit the explanation.
    Explain,
    /// Score an explanation against the glass-box.
    Evaluate,
    /// Rho as a function of texts per class.
    Sweep,
    /// Print top words and sample texts per class.
    DumpSamples,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::TrainLm => "train-lm",
            Command::TrainGlassbox => "train-glassbox",
            Command::Generate => "generate",
            Command::Explain => "explain",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::DumpSamples => "dump-samples",
        }
    }
}

const TOP_LEVEL_KEYS: [&str; 2] = ["seed", "output_dir"];

/// Splits `--path.to.key=value` overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg
            .strip_prefix("--")
            .and_then(|a| a.split_once('='))
            .filter(|(k, _)| k.contains('.') || TOP_LEVEL_KEYS.contains(k));
        match parsed {
            Some((k, v)) => overrides.push((k.to_owned(), v.to_owned())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn print_summary(command: &str, hash: &str, out: &OutputDir, rows: &Rows) {
    let mut all: Rows = vec![
        ("command".into(), command.into()),
        ("config hash".into(), hash.into()),
    ];
    all.extend(rows.iter().cloned());
    if !out.written().is_empty() {
        all.push(("artifacts".into(), out.written().join(", ")));
    }
    let width = all.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in &all {
        println!("{k:<width$}  {v}");
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<(), Failure> {
    let config = RunConfig::load(cli.config.as_deref(), overrides)?;
    let hash = config.hash();
    let ctx = Context {
        hash: hash.clone(),
        workers: cli.workers,
        force: cli.force,
        inputs: Inputs {
            lm: cli.lm.clone(),
            glassbox: cli.glassbox.clone(),
            samples: cli.samples.clone(),
            explanation: cli.explanation.clone(),
        },
        config,
    };
    let name = cli.command.name();
    if cli.command == Command::DumpSamples {
        print!("{}", commands::dump_samples(&ctx)?);
        return Ok(());
    }
    let mut out = OutputDir::create(&ctx.config.output_dir, name, &hash)?;
    let result = match cli.command {
        Command::TrainLm => commands::train_lm(&ctx, &mut out),
        Command::TrainGlassbox => commands::train_glassbox(&ctx, &mut out),
        Command::Generate => commands::generate(&ctx, &mut out),
        Command::Explain => commands::explain(&ctx, &mut out),
        Command::Evaluate => commands::evaluate_cmd(&ctx, &mut out),
        Command::Sweep => commands::sweep(&ctx, &mut out),
        Command::DumpSamples => unreachable!("handled above"),
    };
    match result {
        Ok(rows) => {
            out.finish_manifest()?;
            out.log("ok");
            print_summary(name, &hash, &out, &rows);
            Ok(())
        }
        Err(f) => {
            out.log(&format!("failed {}", f.code));
            Err(f)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.render());
            ExitCode::from(f.exit_code)
        }
    }
}
