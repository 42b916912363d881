use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use clear_core::corpus::{self, generate_synthetic_corpus, LabeledExample, Labels, Task};
use clear_core::detection::detect;
use clear_core::evaluation::{
    evaluate, export_embeddings, load_series, run_encoder_sweep_with, run_pipeline,
    series_dir_name, snapshots_csv, snapshots_summary, MetricsReport, RunOutcome, Variant,
};
use clear_core::training::{
    finetune_with, load_checkpoint, prepare, prepare_with_vocab, pretrain_cl_with, save_checkpoint,
    EpochEvent, FinetuneOptions, LogEntry,
};
use clear_core::{ClearError, RunConfig};

#[derive(Parser)]
#[command(
    name = "clear",
    version,
    about = "Contrastive-learning smart contract vulnerability detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a JSONL corpus, or build one from a directory of .sol files and labels.csv
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic ORDER corpus
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        vuln_fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: contrastive pretraining
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// none, mvv, mvn or rmlm
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Stage two: fine-tune a pretrained checkpoint
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the held-out split with a fine-tuned model
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run ablation variants end to end
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "full,mvv,mvn,rmlm,rcl")]
        variants: Vec<Variant>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recurrent encoders with and without stage one
    SweepEncoders {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch 2-D projections of the correlation vectors
    ExportEmbeddings {
        #[arg(long)]
        ckpt_series: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one source file
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                c.downcast_ref::<ClearError>()
                    .is_some_and(ClearError::is_validation)
            });
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, out } => ingest(&input, &out),
        Command::Synth {
            n,
            vuln_fraction,
            seed,
            out,
        } => {
            let examples = generate_synthetic_corpus(n, vuln_fraction, seed)?;
            write_corpus(&out, &examples)
        }
        Command::Pretrain {
            corpus,
            task,
            config,
            out,
            ablation,
        } => pretrain(&corpus, task, config, &out, &ablation),
        Command::Finetune { ckpt, corpus, out } => finetune(&ckpt, &corpus, &out),
        Command::Eval {
            model,
            corpus,
            report,
        } => eval(&model, &corpus, &report),
        Command::Ablate {
            corpus,
            config,
            variants,
            task,
            out,
        } => ablate(&corpus, config, task, &variants, &out),
        Command::SweepEncoders {
            corpus,
            config,
            task,
            out,
        } => sweep(&corpus, config, task, &out),
        Command::ExportEmbeddings {
            ckpt_series,
            corpus,
            out,
        } => export(&ckpt_series, &corpus, &out),
        Command::Detect { model, task, file } => detect_file(&model, task, &file),
    }
}

fn write_corpus(out: &Path, examples: &[LabeledExample]) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    corpus::write_corpus(out, examples)?;
    Ok(())
}

/// A JSONL file is validated and rewritten. A directory holds `*.sol` files
/// and a `labels.csv` with an `id` column (the file stem) plus one column per task tag.
fn ingest(input: &Path, out: &Path) -> Result<()> {
    let examples = if input.is_dir() {
        ingest_dir(input)?
    } else {
        corpus::load_corpus(input)?
    };
    write_corpus(out, &examples)
}

fn ingest_dir(dir: &Path) -> Result<Vec<LabeledExample>> {
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| ClearError::invalid(format!("{}: {e}", labels_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| ClearError::invalid(e.to_string()))?
        .clone();
    if headers.get(0) != Some("id") {
        return Err(ClearError::invalid("labels.csv must start with an id column").into());
    }
    let tasks = headers
        .iter()
        .skip(1)
        .map(|h| h.trim().parse::<Task>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut examples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ClearError::invalid(format!("labels.csv: {e}")))?;
        let line = row + 2;
        let id = record.get(0).unwrap_or("").trim().to_string();
        let mut labels = Labels::new();
        for (task, cell) in tasks.iter().zip(record.iter().skip(1)) {
            let bit = match cell.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(ClearError::Parse {
                        line,
                        message: format!("label must be 0 or 1, got {other:?}"),
                    }
                    .into())
                }
            };
            labels.insert(*task, bit);
        }
        let path = dir.join(format!("{id}.sol"));
        let source = fs::read_to_string(&path).map_err(|e| ClearError::io(&path, e))?;
        examples.push(LabeledExample { id, source, labels });
    }
    // round-trip through the JSONL reader for its id and label checks
    Ok(corpus::read_corpus(
        corpus::corpus_to_jsonl(&examples).as_bytes(),
    )?)
}

fn load_config(path: Option<PathBuf>, task: Option<Task>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::desk(),
    };
    if let Some(task) = task {
        cfg.train.task = task;
    }
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn apply_seed_override(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(seed) = std::env::var("CLEAR_SEED") {
        cfg.train.seed = seed.trim().parse().map_err(|_| {
            ClearError::invalid(format!(
                "CLEAR_SEED must be an unsigned integer, got {seed:?}"
            ))
        })?;
    }
    Ok(())
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    corpus_hash: &str,
    vocab_hash: &str,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config: serde_json::Map<String, Value> = cfg
        .resolved()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    write_json(
        &out.join("run_manifest.json"),
        &json!({
            "command": command,
            "config": config,
            "seeds": { "train": cfg.train.seed, "split": cfg.train.seed },
            "corpus_hash": corpus_hash,
            "vocab_hash": vocab_hash,
            "code_version": env!("CARGO_PKG_VERSION"),
            "started_at": unix_time(),
        }),
    )
}

struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        let file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { file })
    }

    fn append(&mut self, entry: &LogEntry) -> clear_core::Result<()> {
        let line = serde_json::to_string(entry)?;
        writeln!(self.file, "{line}").map_err(|e| ClearError::io("train_log.jsonl", e))
    }
}

fn report_line(entry: &LogEntry) {
    eprintln!(
        "{} epoch {:>3}  mlm {:.4}  cl {:.4}  cla {:.4}  total {:.4}",
        entry.stage, entry.epoch, entry.loss_mlm, entry.loss_cl, entry.loss_cla, entry.loss_total
    );
}

fn pretrain(
    corpus_path: &Path,
    task: Task,
    config: Option<PathBuf>,
    out: &Path,
    ablation: &str,
) -> Result<()> {
    let mut cfg = load_config(config, Some(task))?;
    match ablation {
        "rmlm" => cfg.loss.lambda_mlm = 0.0,
        other => cfg.ablation = other.parse()?,
    }
    let examples = corpus::load_corpus(corpus_path)?;
    let prepared = prepare(&examples, &cfg)?;
    write_manifest(
        out,
        "pretrain",
        &cfg,
        &corpus::corpus_hash(&examples),
        &prepared.vocab.hash(),
    )?;
    let series = out.join("series");
    let mut log = LogWriter::create(&out.join("train_log.jsonl"))?;
    let mut hook = |e: &EpochEvent| -> clear_core::Result<()> {
        report_line(e.entry);
        log.append(e.entry)?;
        let snapshot = clear_core::training::Checkpoint {
            state: e.state.clone(),
            vocab: prepared.vocab.clone(),
            config: RunConfig {
                encoder: e.state.config().clone(),
                ..cfg.clone()
            },
            stage: clear_core::training::Stage::Cl,
            epoch: e.entry.epoch,
            log: Vec::new(),
        };
        save_checkpoint(&snapshot, &series.join(series_dir_name(e.entry.epoch)))
    };
    let result = pretrain_cl_with(&prepared, &cfg, &mut hook)?;
    save_checkpoint(&result.best, &out.join("best"))?;
    save_checkpoint(&result.last, out)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn finetune(ckpt_dir: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let mut cfg = ckpt.config.clone();
    apply_seed_override(&mut cfg)?;
    let examples = corpus::load_corpus(corpus_path)?;
    let prepared = prepare_with_vocab(&examples, &ckpt.vocab, &cfg)?;
    write_manifest(
        out,
        "finetune",
        &cfg,
        &corpus::corpus_hash(&examples),
        &ckpt.vocab.hash(),
    )?;
    let mut log = LogWriter::create(&out.join("train_log.jsonl"))?;
    let ckpt = clear_core::training::Checkpoint {
        config: cfg,
        ..ckpt
    };
    let model = finetune_with(ckpt, &prepared, &FinetuneOptions::default(), &mut |e| {
        report_line(e.entry);
        log.append(e.entry)
    })?;
    save_checkpoint(&model, out)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn eval(model_dir: &Path, corpus_path: &Path, report: &Path) -> Result<()> {
    let model = load_checkpoint(model_dir)?;
    let examples = corpus::load_corpus(corpus_path)?;
    let prepared = prepare_with_vocab(&examples, &model.vocab, &model.config)?;
    let metrics = evaluate(&model, &prepared.split.test, "model")?;
    write_json(report, &serde_json::to_value(&metrics)?)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn save_outcome(dir: &Path, run: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::to_value(&run.report)?,
    )?;
    let mut log = String::new();
    for e in &run.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    fs::write(dir.join("train_log.jsonl"), log)?;
    save_checkpoint(&run.model, &dir.join("model"))?;
    Ok(())
}

fn summary(reports: &[&MetricsReport]) -> Value {
    Value::Array(
        reports
            .iter()
            .map(|r| json!({ "variant": r.variant, "precision": r.precision, "recall": r.recall, "f1": r.f1 }))
            .collect(),
    )
}

fn ablate(
    corpus_path: &Path,
    config: Option<PathBuf>,
    task: Option<Task>,
    variants: &[Variant],
    out: &Path,
) -> Result<()> {
    if variants.is_empty() {
        bail!(ClearError::invalid("no variants requested"));
    }
    let base = load_config(config, task)?;
    let examples = corpus::load_corpus(corpus_path)?;
    let base_prepared = prepare(&examples, &base)?;
    write_manifest(
        out,
        "ablate",
        &base,
        &corpus::corpus_hash(&examples),
        &base_prepared.vocab.hash(),
    )?;
    let mut runs = Vec::new();
    for &variant in variants {
        eprintln!("variant {variant}");
        let (cfg, with_cl) = variant.apply(&base);
        let run = run_pipeline(&base_prepared, &cfg, with_cl, variant.tag(), &mut |e| {
            report_line(e.entry);
            Ok(())
        })?;
        save_outcome(&out.join(variant.tag()), &run)?;
        runs.push(run);
    }
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
    write_json(&out.join("summary.json"), &summary(&reports))?;
    println!("{}", serde_json::to_string(&summary(&reports))?);
    Ok(())
}

fn sweep(
    corpus_path: &Path,
    config: Option<PathBuf>,
    task: Option<Task>,
    out: &Path,
) -> Result<()> {
    let base = load_config(config, task)?;
    let examples = corpus::load_corpus(corpus_path)?;
    let vocab_hash = prepare(&examples, &base)?.vocab.hash();
    write_manifest(
        out,
        "sweep-encoders",
        &base,
        &corpus::corpus_hash(&examples),
        &vocab_hash,
    )?;
    let runs = run_encoder_sweep_with(&examples, &base, &mut |tag, run| {
        eprintln!("{tag}: f1 {:.4}", run.report.f1);
        save_outcome(&out.join(tag), run).map_err(|e| ClearError::invalid(format!("{e:#}")))
    })?;
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
    write_json(&out.join("summary.json"), &summary(&reports))?;
    println!("{}", serde_json::to_string(&summary(&reports))?);
    Ok(())
}

fn export(series_dir: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let series = load_series(series_dir)?;
    let examples = corpus::load_corpus(corpus_path)?;
    let snapshots = export_embeddings(&series, &examples)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("embeddings.csv"), snapshots_csv(&snapshots))?;
    write_json(
        &out.join("explained_variance.json"),
        &serde_json::to_value(snapshots_summary(&snapshots))?,
    )?;
    eprintln!("{} snapshots written to {}", snapshots.len(), out.display());
    Ok(())
}

fn detect_file(model_dir: &Path, task: Task, file: &Path) -> Result<()> {
    let model = load_checkpoint(model_dir)?;
    let source = fs::read_to_string(file).map_err(|e| ClearError::io(file, e))?;
    let id = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let p = detect(&id, &source, &model, task)?;
    println!(
        "{{\"id\":{},\"task\":\"{}\",\"probability\":{:.6},\"verdict\":{}}}",
        serde_json::to_string(&p.id)?,
        p.task,
        p.probability,
        p.verdict
    );
    Ok(())
}
