//! Metrics, ablation and encoder-sweep drivers, and embedding export.

mod pca;

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use pca::{covariance, pca2, Pca};

use crate::config::RunConfig;
use crate::corpus::{encode_corpus, split_hash, EncodedExample, LabeledExample, Task};
use crate::detection::{predict, score};
use crate::encoder::{EncoderKind, ModelState};
use crate::error::{ClearError, Result};
use crate::sampling::Ablation;
use crate::training::{
    self, finetune_with, init_checkpoint, load_checkpoint, prepare, pretrain_cl_with, Checkpoint,
    EpochHook, FinetuneOptions, LogEntry, Prepared, Stage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub variant: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when TP + FP = 0.
    pub precision_degenerate: bool,
    /// Set when TP + FN = 0.
    pub recall_degenerate: bool,
    /// Set when P + R = 0.
    pub f1_degenerate: bool,
}

pub fn compute_metrics(
    predictions: &[u8],
    labels: &[u8],
    task: Task,
    variant: &str,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(ClearError::invalid(
            "predictions and labels differ in length",
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(ClearError::invalid("predictions and labels must be 0 or 1")),
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_degenerate) = ratio(tp, tp + fp);
    let (recall, recall_degenerate) = ratio(tp, tp + fn_);
    let f1_degenerate = precision + recall == 0.0;
    let f1 = if f1_degenerate {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        task,
        variant: variant.to_string(),
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1,
        precision_degenerate,
        recall_degenerate,
        f1_degenerate,
    })
}

/// Score `examples` with a fine-tuned checkpoint at its configured threshold.
pub fn evaluate(
    ckpt: &Checkpoint,
    examples: &[EncodedExample],
    variant: &str,
) -> Result<MetricsReport> {
    if ckpt.stage != Stage::Ft {
        return Err(ClearError::StageMismatch {
            expected: Stage::Ft.to_string(),
            found: ckpt.stage.to_string(),
        });
    }
    let task = ckpt.config.train.task;
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(predict(
            score(&ckpt.state, &ex.contract.token_ids)?,
            ckpt.config.threshold,
        ));
        labels.push(ex.label(task));
    }
    compute_metrics(&preds, &labels, task, variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Mvv,
    Mvn,
    Rmlm,
    Rcl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Mvv,
        Variant::Mvn,
        Variant::Rmlm,
        Variant::Rcl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Mvv => "mvv",
            Variant::Mvn => "mvn",
            Variant::Rmlm => "rmlm",
            Variant::Rcl => "rcl",
        }
    }

    /// The base configuration adjusted for this variant, and whether stage one runs.
    pub fn apply(self, base: &RunConfig) -> (RunConfig, bool) {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::Mvv => cfg.ablation = Ablation::MaskVv,
            Variant::Mvn => cfg.ablation = Ablation::MaskVn,
            Variant::Rmlm => cfg.loss.lambda_mlm = 0.0,
            Variant::Rcl => return (cfg, false),
        }
        (cfg, true)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                ClearError::invalid(format!(
                    "unknown variant {s:?} (expected full, mvv, mvn, rmlm or rcl)"
                ))
            })
    }
}

/// Result of one pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub log: Vec<LogEntry>,
    pub split_hash: String,
    pub model: Checkpoint,
}

/// Optional stage one, then stage two, then scoring on the held-out split.
pub fn run_pipeline(
    prepared: &Prepared,
    config: &RunConfig,
    with_cl: bool,
    tag: &str,
    hook: &mut EpochHook,
) -> Result<RunOutcome> {
    let start = if with_cl {
        pretrain_cl_with(prepared, config, hook)?.last
    } else {
        init_checkpoint(prepared, config)?
    };
    let model = finetune_with(start, prepared, &FinetuneOptions::default(), hook)?;
    let report = evaluate(&model, &prepared.split.test, tag)?;
    Ok(RunOutcome {
        report,
        log: model.log.clone(),
        split_hash: split_hash(&prepared.split),
        model,
    })
}

pub fn run_variant(
    corpus: &[LabeledExample],
    base: &RunConfig,
    variant: Variant,
) -> Result<RunOutcome> {
    run_variant_with(corpus, base, variant, &mut |_| Ok(()))
}

pub fn run_variant_with(
    corpus: &[LabeledExample],
    base: &RunConfig,
    variant: Variant,
    hook: &mut EpochHook,
) -> Result<RunOutcome> {
    let (cfg, with_cl) = variant.apply(base);
    let prepared = prepare(corpus, &cfg)?;
    run_pipeline(&prepared, &cfg, with_cl, variant.tag(), hook)
}

/// Tag of a sweep run, e.g. `CL-gru` or `gru`.
pub fn sweep_tag(kind: EncoderKind, with_cl: bool) -> String {
    if with_cl {
        format!("CL-{kind}")
    } else {
        kind.to_string()
    }
}

/// For each recurrent kind, one run with stage one and one without.
pub fn run_encoder_sweep(corpus: &[LabeledExample], base: &RunConfig) -> Result<Vec<RunOutcome>> {
    run_encoder_sweep_with(corpus, base, &mut |_, _| Ok(()))
}

pub fn run_encoder_sweep_with(
    corpus: &[LabeledExample],
    base: &RunConfig,
    on_done: &mut dyn FnMut(&str, &RunOutcome) -> Result<()>,
) -> Result<Vec<RunOutcome>> {
    let mut out = Vec::with_capacity(6);
    for kind in [EncoderKind::Rnn, EncoderKind::Lstm, EncoderKind::Gru] {
        let mut cfg = base.clone();
        cfg.encoder.encoder_kind = kind;
        let prepared = prepare(corpus, &cfg)?;
        for with_cl in [true, false] {
            let tag = sweep_tag(kind, with_cl);
            let run = run_pipeline(&prepared, &cfg, with_cl, &tag, &mut |_| Ok(()))?;
            on_done(&tag, &run)?;
            out.push(run);
        }
    }
    Ok(out)
}

/// Eval-mode `v` rows for `examples`.
pub fn embed_examples(state: &ModelState, examples: &[EncodedExample]) -> Result<Array2<f64>> {
    let ids: Vec<&[usize]> = examples
        .iter()
        .map(|e| e.contract.token_ids.as_slice())
        .collect();
    training::embed(state, &ids)
}

/// Euclidean distance between the mean `v` of label-1 rows and of label-0 rows.
pub fn centroid_distance(v: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    if v.nrows() != labels.len() {
        return Err(ClearError::invalid("row count and label count differ"));
    }
    let centroid = |want: u8| -> Result<Array1<f64>> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
        if rows.is_empty() {
            return Err(ClearError::invalid(format!("no rows with label {want}")));
        }
        Ok(v.select(Axis(0), &rows)
            .mean_axis(Axis(0))
            .expect("non-empty"))
    };
    let d = centroid(1)? - centroid(0)?;
    Ok(d.dot(&d).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    pub epoch: usize,
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub coords: Array2<f64>,
    pub components: Array2<f64>,
    pub explained: [f64; 2],
    /// Centroid distance in `v`-space before projection.
    pub centroid_distance: f64,
}

pub fn snapshot(
    state: &ModelState,
    examples: &[EncodedExample],
    task: Task,
    epoch: usize,
) -> Result<EmbeddingSnapshot> {
    if examples.len() < 3 {
        return Err(ClearError::invalid(format!(
            "need at least 3 contracts, got {}",
            examples.len()
        )));
    }
    let v = embed_examples(state, examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label(task)).collect();
    let p = pca2(&v)?;
    Ok(EmbeddingSnapshot {
        epoch,
        ids: examples.iter().map(|e| e.id().to_string()).collect(),
        centroid_distance: centroid_distance(&v, &labels)?,
        labels,
        coords: p.coords,
        components: p.components,
        explained: p.explained,
    })
}

/// Per-epoch checkpoints under `dir`, in the layout written by `pretrain`:
/// one `epoch-NNN` subdirectory per epoch.
pub fn load_series(dir: &Path) -> Result<Vec<Checkpoint>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ClearError::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ClearError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name
            .strip_prefix("epoch-")
            .and_then(|n| n.parse::<usize>().ok())
        {
            found.push((n, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(ClearError::invalid(format!(
            "no epoch-NNN checkpoints under {}",
            dir.display()
        )));
    }
    found.sort();
    found
        .into_iter()
        .map(|(_, p)| load_checkpoint(&p))
        .collect()
}

pub fn series_dir_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

/// One snapshot per checkpoint over every contract of `corpus`.
pub fn export_embeddings(
    series: &[Checkpoint],
    corpus: &[LabeledExample],
) -> Result<Vec<EmbeddingSnapshot>> {
    if corpus.len() < 3 {
        return Err(ClearError::invalid(format!(
            "need at least 3 contracts, got {}",
            corpus.len()
        )));
    }
    series
        .iter()
        .map(|ckpt| {
            let examples = encode_corpus(corpus, &ckpt.vocab, ckpt.config.encoder.max_len);
            snapshot(&ckpt.state, &examples, ckpt.config.train.task, ckpt.epoch)
        })
        .collect()
}

pub fn snapshots_csv(snapshots: &[EmbeddingSnapshot]) -> String {
    let mut out = String::from("epoch,id,label,x,y\n");
    for s in snapshots {
        for (i, id) in s.ids.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.epoch,
                id,
                s.labels[i],
                s.coords[[i, 0]],
                s.coords[[i, 1]]
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub epoch: usize,
    pub explained_variance: [f64; 2],
    pub centroid_distance: f64,
}

pub fn snapshots_summary(snapshots: &[EmbeddingSnapshot]) -> Vec<SnapshotSummary> {
    snapshots
        .iter()
        .map(|s| SnapshotSummary {
            epoch: s.epoch,
            explained_variance: s.explained,
            centroid_distance: s.centroid_distance,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let mut preds = vec![1; 10];
        let mut labels = vec![1; 9];
        labels.push(0);
        preds.extend([0; 3].iter().chain(&[0; 7]));
        labels.extend([1; 3].iter().chain(&[0; 7]));
        let m = compute_metrics(&preds, &labels, Task::Order, "full").unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (9, 1, 3, 7));
        assert!((m.precision - 0.9).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 0.818182).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = compute_metrics(&[1, 0, 1], &[1, 0, 1], Task::Order, "x").unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[0, 0, 0], &[1, 0, 1], Task::Order, "x").unwrap();
        assert_eq!(m.recall, 0.0);
        assert!(m.precision_degenerate && !m.recall_degenerate && m.f1_degenerate);
        assert!(compute_metrics(&[0], &[0, 1], Task::Order, "x").is_err());
        assert!(compute_metrics(&[2], &[0], Task::Order, "x").is_err());
    }

    #[test]
    fn matches_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.gen_range(0..40);
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let m = compute_metrics(&p, &y, Task::Order, "x").unwrap();
            let count = |a: u8, b: u8| {
                p.iter()
                    .zip(&y)
                    .filter(|&(&x, &z)| x == a && z == b)
                    .count()
            };
            assert_eq!(
                (m.tp, m.fp, m.tn, m.fn_),
                (count(1, 1), count(1, 0), count(0, 0), count(0, 1))
            );
            assert_eq!(m.tp + m.fp + m.tn + m.fn_, n);
        }
    }

    #[test]
    fn centroid_distance_by_hand() {
        let v = ndarray::array![[0.0, 0.0], [2.0, 0.0], [3.0, 4.0], [3.0, 4.0]];
        let d = centroid_distance(&v, &[0, 0, 1, 1]).unwrap();
        assert!((d - (4.0f64 + 16.0).sqrt()).abs() < 1e-12);
        assert!(centroid_distance(&v, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn variant_tags() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        let base = RunConfig::desk();
        assert_eq!(Variant::Rmlm.apply(&base).0.loss.lambda_mlm, 0.0);
        assert!(!Variant::Rcl.apply(&base).1);
        assert_eq!(Variant::Mvn.apply(&base).0.ablation, Ablation::MaskVn);
        assert_eq!(sweep_tag(EncoderKind::Gru, true), "CL-gru");
    }
}
