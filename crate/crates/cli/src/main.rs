//! Command-line front end: synthetic corpus generation, few-shot training,
//! evaluation, OCR-error robustness reports, and the component ablation
//! runner. Every command is deterministic given its flags and seeds, and
//! every run directory receives the fully resolved configuration.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use fsdag_core::doc::{load_document, save_document, Document};
use fsdag_core::eval::{evaluate, robustness_report, ConfusionTable, EvalReport};
use fsdag_core::model::{self, checkpoint};
use fsdag_core::synth::{builtin_template, generate, split, CorpusManifest, TemplateSpec};
use fsdag_core::train::train_with_hook;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fsdag", version, about = "Few-shot document-graph key information extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic form-document corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus (or its train split).
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Clean vs OCR-perturbed evaluation with the performance drop.
    Robust(RobustArgs),
    /// Run the component ablation grid and tabulate macro F1.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in template name (e.g. basic8).
    #[arg(long, conflicts_with = "template_file")]
    template: Option<String>,
    /// Template specification file (JSON).
    #[arg(long)]
    template_file: Option<PathBuf>,
    /// Number of documents to generate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Intended train-split size recorded in the manifest.
    #[arg(long, default_value_t = 5)]
    train: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Train-split size; when set, commands operate on the requested part.
    #[arg(long)]
    split: Option<usize>,
    /// Seed for the split shuffle.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Config file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset applied after the config file.
    #[arg(long)]
    ablate: Option<String>,
    /// Individual overrides, e.g. --set model.steps=3 (repeatable).
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Which split part to evaluate when --split is given.
    #[arg(long, default_value = "test")]
    part: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report file (defaults to report.json next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Word-level perturbation probability.
    #[arg(long, default_value_t = 0.1, value_parser = probability)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Seeds per configuration.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("probability {v} outside [0, 1]"))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Robust(args) => cmd_robust(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

// ── Corpus I/O ───────────────────────────────────────────────────────

fn write_corpus(docs: &[Document], manifest: &CorpusManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, doc) in docs.iter().enumerate() {
        save_document(doc, &dir.join(format!("doc_{i:04}.json")))
            .with_context(|| format!("writing document {i}"))?;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(Vec<Document>, Option<CorpusManifest>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("doc_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no doc_*.json files in {}", dir.display());
    }
    let docs = paths
        .iter()
        .map(|p| load_document(p).map_err(|e| anyhow!("{e}")))
        .collect::<Result<Vec<_>>>()?;
    let manifest = std::fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok());
    Ok((docs, manifest))
}

fn apply_split(
    docs: Vec<Document>,
    args: &SplitArgs,
    manifest: Option<&CorpusManifest>,
) -> Result<(Vec<Document>, Vec<Document>)> {
    let n_train = args
        .split
        .or_else(|| manifest.map(|m| m.n_train).filter(|&n| n > 0))
        .ok_or_else(|| anyhow!("no --split given and the corpus manifest records no train size"))?;
    Ok(split(docs, n_train, args.split_seed)?)
}

fn resolve_config(
    file: Option<&PathBuf>,
    preset: Option<&str>,
    sets: &[String],
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: u64,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    if let Some(name) = preset {
        cfg.apply_preset(name)?;
    }
    for kv in sets {
        cfg.apply_kv(kv)?;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
    cfg.train.seed = seed;
    cfg.model.validate().map_err(|e| anyhow!("invalid model config: {e}"))?;
    Ok(cfg)
}

// ── Commands ─────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let template: TemplateSpec = match (&args.template, &args.template_file) {
        (Some(name), None) => {
            builtin_template(name).ok_or_else(|| anyhow!("unknown built-in template {name:?}"))?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading template {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing template {}", path.display()))?
        }
        _ => bail!("exactly one of --template or --template-file is required"),
    };
    let n = args.n as usize;
    let n_train = (args.train as usize).min(n);
    let docs = generate(&template, n, args.seed)?;
    let manifest = CorpusManifest {
        seed: args.seed,
        template: template.name.clone(),
        n_train,
        n_test: n - n_train,
    };
    write_corpus(&docs, &manifest, &args.out)?;
    let total_regions: usize = docs.iter().map(Document::len).sum();
    println!(
        "wrote {n} documents ({} classes, {total_regions} regions) to {}",
        template.classes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(
        args.config.as_ref(),
        args.ablate.as_deref(),
        &args.sets,
        args.epochs,
        args.lr,
        args.seed,
    )?;
    let (docs, manifest) = load_corpus(&args.corpus)?;
    let train_docs = if args.split.split.is_some() || manifest.as_ref().is_some_and(|m| m.n_train > 0) {
        apply_split(docs, &args.split, manifest.as_ref())?.0
    } else {
        docs
    };
    std::fs::create_dir_all(&args.out)?;
    cfg.write_resolved(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    let ckpt_path = args.out.join("model.ckpt");
    let every = cfg.train.checkpoint_every;
    let (params, logs) = train_with_hook(&train_docs, cfg.model.clone(), &cfg.train, |epoch, params, log| {
        let line = serde_json::to_string(log).expect("log serialization");
        let _ = writeln!(log_file, "{line}");
        if every > 0 && epoch % every == 0 {
            let _ = checkpoint::save_checkpoint(params, &ckpt_path);
        }
    })?;
    checkpoint::save_checkpoint(&params, &ckpt_path)?;
    let final_f1 = logs.last().map_or(0.0, |l| l.macro_f1);
    println!("trained {} epochs on {} docs; final train macro F1 {final_f1:.4}", cfg.train.epochs, train_docs.len());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn select_eval_docs(args: &EvalArgs) -> Result<Vec<Document>> {
    let (docs, manifest) = load_corpus(&args.corpus)?;
    if args.split.split.is_none() && manifest.as_ref().is_none_or(|m| m.n_train == 0) {
        return Ok(docs);
    }
    let (train_part, test_part) = apply_split(docs, &args.split, manifest.as_ref())?;
    match args.part.as_str() {
        "train" => Ok(train_part),
        "test" => Ok(test_part),
        other => bail!("unknown --part {other:?} (expected train or test)"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let params = checkpoint::load_checkpoint(&args.checkpoint)?;
    let docs = select_eval_docs(&args)?;
    let embedder = model::make_embedder(&params.config)?;
    let report = evaluate(&params, &docs, &embedder)?;
    let out = report_path(&args);
    write_report(&report, &out)?;
    println!("macro F1 {:.4} over {} docs -> {}", report.macro_f1, docs.len(), out.display());
    Ok(())
}

fn cmd_robust(args: RobustArgs) -> Result<()> {
    let params = checkpoint::load_checkpoint(&args.eval.checkpoint)?;
    let docs = select_eval_docs(&args.eval)?;
    let embedder = model::make_embedder(&params.config)?;
    let report = robustness_report(&params, &docs, args.p, &ConfusionTable::default(), args.seed, &embedder)?;
    let out = args.eval.out.clone().unwrap_or_else(|| {
        args.eval
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("robust.json")
    });
    write_report(&report, &out)?;
    println!(
        "clean macro F1 {:.4}, perturbed {:.4} at p={}, drop {:+.4} -> {}",
        report.clean_macro_f1.unwrap_or(0.0),
        report.macro_f1,
        args.p,
        report.drop.unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn report_path(args: &EvalArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.json")
    })
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, report.to_json())?;
    Ok(())
}

// ── Ablation grid ────────────────────────────────────────────────────

const ABLATION_ROWS: [&str; 5] = ["skeleton", "pooling", "visual", "positional", "full"];

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (docs, manifest) = load_corpus(&args.corpus)?;
    let (train_docs, test_docs) = apply_split(docs, &args.split, manifest.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    // Echo the base configuration the ablation rows are derived from.
    resolve_config(args.config.as_ref(), None, &args.sets, args.epochs, None, args.seed)?
        .write_resolved(&args.out)?;

    struct Job {
        row: &'static str,
        seed: u64,
        cfg: RunConfig,
    }
    let mut jobs = Vec::new();
    for row in ABLATION_ROWS {
        for s in 0..args.seeds {
            let mut cfg = resolve_config(
                args.config.as_ref(),
                None,
                &args.sets,
                args.epochs,
                None,
                args.seed + s,
            )?;
            cfg.apply_preset(row)?;
            jobs.push(Job { row, seed: args.seed + s, cfg });
        }
    }

    let workers = std::env::var("FSDAG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let results: Vec<(usize, f64)> = {
        let job_iter = std::sync::Mutex::new(jobs.iter().enumerate());
        let results = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let next = job_iter.lock().unwrap().next();
                    let Some((idx, job)) = next else { break };
                    let f1 = run_ablation_job(&job.cfg, &train_docs, &test_docs)
                        .unwrap_or_else(|e| panic!("ablation row {} seed {}: {e:#}", job.row, job.seed));
                    results.lock().unwrap().push((idx, f1));
                });
            }
        });
        let mut r = results.into_inner().unwrap();
        r.sort_by_key(|&(idx, _)| idx);
        r
    };

    let mut table = Vec::new();
    let mut mean_by_row: Vec<(String, f64)> = Vec::new();
    for (r, row) in ABLATION_ROWS.iter().enumerate() {
        let scores: Vec<f64> = results
            [r * args.seeds as usize..(r + 1) * args.seeds as usize]
            .iter()
            .map(|&(_, f1)| f1)
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        mean_by_row.push((row.to_string(), mean));
        table.push(serde_json::json!({
            "configuration": row,
            "seeds": scores,
            "mean_macro_f1": mean,
        }));
    }
    let skeleton_mean = mean_by_row[0].1;
    for (entry, (_, mean)) in table.iter_mut().zip(&mean_by_row) {
        entry["gain_vs_skeleton"] = serde_json::json!(mean - skeleton_mean);
    }

    std::fs::write(
        args.out.join("table.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(table))?,
    )?;
    let mut md = String::from("| configuration | mean macro F1 | gain vs skeleton |\n|---|---|---|\n");
    for (row, mean) in &mean_by_row {
        md.push_str(&format!("| {row} | {mean:.4} | {:+.4} |\n", mean - skeleton_mean));
    }
    std::fs::write(args.out.join("table.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn run_ablation_job(cfg: &RunConfig, train_docs: &[Document], test_docs: &[Document]) -> Result<f64> {
    let (params, _) = fsdag_core::train::train(train_docs, cfg.model.clone(), &cfg.train)?;
    let embedder = model::make_embedder(&params.config)?;
    let report = evaluate(&params, test_docs, &embedder)?;
    Ok(report.macro_f1)
}
