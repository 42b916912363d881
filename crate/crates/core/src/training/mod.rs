//! Stage one (contrastive pretraining) and stage two (fine-tuning).

mod checkpoint;

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::config::RunConfig;
use crate::corpus::{
    self, build_vocabulary, encode_corpus, tokenize, CorpusSplit, EncodedExample, LabeledExample,
    Task, Vocabulary,
};
use crate::encoder::{apply_mlm_mask_with, MaskedBatch, Mode, ModelState};
use crate::error::{ClearError, Result};
use crate::objectives::{LossConfig, LossReport};
use crate::optim::AdamW;
use crate::rng;
use crate::sampling::{build_pos_set, sample_pairs};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_vocab, save_checkpoint, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_cl: usize,
    pub epochs_ft: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub optimizer: String,
    pub task: Task,
    pub device: String,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs_cl: 20,
            epochs_ft: 10,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            optimizer: "adamw".into(),
            task: Task::Reentrancy,
            device: "cpu".into(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs_cl: 100,
            epochs_ft: 20,
            ..Self::desk()
        }
    }

    /// A zero learning rate is accepted here (it is a useful null update);
    /// configuration files require a positive one.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ClearError::invalid(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 || self.epochs_cl == 0 || self.epochs_ft == 0 {
            return Err(ClearError::invalid(
                "batch_size, epochs_cl and epochs_ft must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(ClearError::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ClearError::invalid(
                "adam_eps must be positive and weight_decay non-negative",
            ));
        }
        if self.optimizer != "adamw" {
            return Err(ClearError::invalid(format!(
                "unsupported optimizer {:?}",
                self.optimizer
            )));
        }
        if self.device != "cpu" {
            return Err(ClearError::invalid(format!(
                "unsupported device {:?}",
                self.device
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cl,
    Ft,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Cl => "cl",
            Stage::Ft => "ft",
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub loss_mlm: f64,
    pub loss_cl: f64,
    pub loss_total: f64,
    pub loss_cla: f64,
    pub wall_time: f64,
    pub seed: u64,
}

impl LogEntry {
    pub fn report(&self) -> LossReport {
        LossReport {
            loss_mlm: self.loss_mlm,
            loss_cl: self.loss_cl,
            loss_total: self.loss_total,
            loss_cla: self.loss_cla,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub vocab: Vocabulary,
    /// Run configuration; `encoder.vocab_size` matches `vocab`.
    pub config: RunConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub log: Vec<LogEntry>,
}

/// A corpus split, the vocabulary fitted on its training half, and both halves encoded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub split: CorpusSplit<EncodedExample>,
}

fn split_raw(corpus: &[LabeledExample], config: &RunConfig) -> Result<CorpusSplit<LabeledExample>> {
    corpus::split(corpus, config.split_ratio, config.train.seed)
}

/// Split, fit the vocabulary on the training half, encode.
pub fn prepare(corpus: &[LabeledExample], config: &RunConfig) -> Result<Prepared> {
    let raw = split_raw(corpus, config)?;
    let tokens: Vec<Vec<String>> = raw.train.iter().map(|ex| tokenize(&ex.source)).collect();
    let vocab = build_vocabulary(&tokens, config.min_frequency)?;
    Ok(encode_split(raw, vocab, config))
}

/// Split and encode with an existing vocabulary.
pub fn prepare_with_vocab(
    corpus: &[LabeledExample],
    vocab: &Vocabulary,
    config: &RunConfig,
) -> Result<Prepared> {
    Ok(encode_split(
        split_raw(corpus, config)?,
        vocab.clone(),
        config,
    ))
}

fn encode_split(
    raw: CorpusSplit<LabeledExample>,
    vocab: Vocabulary,
    config: &RunConfig,
) -> Prepared {
    let max_len = config.encoder.max_len;
    let split = CorpusSplit {
        train: encode_corpus(&raw.train, &vocab, max_len),
        test: encode_corpus(&raw.test, &vocab, max_len),
        seed: raw.seed,
        ratio: raw.ratio,
    };
    Prepared { vocab, split }
}

/// One contrastive pair after masking.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub a: MaskedBatch,
    pub b: MaskedBatch,
    pub label: u8,
}

/// Unmasked input used when the MLM term is disabled.
pub fn unmasked(ids: &[usize]) -> MaskedBatch {
    MaskedBatch {
        masked_ids: ids.to_vec(),
        target_ids: ids.to_vec(),
        mask_positions: Vec::new(),
    }
}

/// Stage-one objective for a batch of pairs. Both members of every pair go
/// through the same `state`; batch normalization sees all `2B` members.
pub fn stage1_loss<'p>(
    state: &'p ModelState,
    tape: &mut Tape<'p>,
    batch: &[PairInput],
    loss: &LossConfig,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(ClearError::invalid("empty batch"));
    }
    let mut summaries = Vec::with_capacity(2 * batch.len());
    let mut mlm_terms = Vec::new();
    let mut pairs = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        for member in [&item.a, &item.b] {
            let vars = state.encode_contract(tape, &member.masked_ids, &member.mask_positions)?;
            if let Some(logits) = vars.mlm_logits {
                mlm_terms.push(tape.mlm_loss(
                    logits,
                    &member.target_ids,
                    &member.mask_positions,
                )?);
            }
            summaries.push(vars.summary);
        }
        pairs.push((2 * i, 2 * i + 1, item.label));
    }
    let stacked = tape.concat_rows(&summaries);
    let v = state.project(tape, stacked, Mode::Train)?;
    let cl = tape.contrastive(v, &pairs, loss.margin);
    let cl_weighted = tape.scale(cl, loss.lambda_cl);
    let (total, mlm_value) = if mlm_terms.is_empty() {
        (cl_weighted, 0.0)
    } else {
        let cat = tape.concat_rows(&mlm_terms);
        let sum = tape.sum_rows(cat);
        let mean = tape.scale(sum, 1.0 / mlm_terms.len() as f64);
        let weighted = tape.scale(mean, loss.lambda_mlm);
        (tape.add(cl_weighted, weighted), tape.scalar(mean))
    };
    let report = LossReport {
        loss_mlm: mlm_value,
        loss_cl: tape.scalar(cl),
        loss_total: tape.scalar(total),
        loss_cla: 0.0,
    };
    Ok((total, report))
}

/// Stage-two objective: mean classification loss over single contracts.
pub fn stage2_loss<'p>(
    state: &'p ModelState,
    tape: &mut Tape<'p>,
    batch: &[(&[usize], u8)],
) -> Result<(Var, Var)> {
    if batch.is_empty() {
        return Err(ClearError::invalid("empty batch"));
    }
    let mut pooled = Vec::with_capacity(batch.len());
    let mut summaries = Vec::with_capacity(batch.len());
    for &(ids, _) in batch {
        let vars = state.encode_contract(tape, ids, &[])?;
        pooled.push(state.avg_pool(tape, vars.features, vars.valid)?);
        summaries.push(vars.summary);
    }
    let pooled = tape.concat_rows(&pooled);
    let summaries = tape.concat_rows(&summaries);
    let v = state.project(tape, summaries, Mode::Train)?;
    let p = state.classify_batch(tape, pooled, v);
    let labels: Vec<u8> = batch.iter().map(|&(_, y)| y).collect();
    Ok((tape.bce(p, &labels)?, p))
}

/// Contiguous batches of at most `size`; a trailing singleton joins the
/// previous batch so batch normalization never sees a single row.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Passed to the per-epoch callback.
pub struct EpochEvent<'a> {
    pub entry: &'a LogEntry,
    pub state: &'a ModelState,
}

pub type EpochHook<'h> = dyn FnMut(&EpochEvent) -> Result<()> + 'h;

fn noop(_: &EpochEvent) -> Result<()> {
    Ok(())
}

/// Apply gradients, then fold the batch-norm statistics recorded on the tape.
fn apply_step(
    state: &mut ModelState,
    opt: &mut AdamW,
    grads: &crate::autograd::Gradients,
    stats: Option<(Vec<f64>, Vec<f64>, usize)>,
) {
    opt.step(state.params_mut(), grads);
    if let Some((mean, var, count)) = stats {
        state.update_running_stats(&mean, &var, count);
    }
}

fn tape_stats(tape: &Tape) -> Option<(Vec<f64>, Vec<f64>, usize)> {
    tape.batch_stats()
        .first()
        .map(|s| (s.mean.clone(), s.var.clone(), s.count))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.loss_mlm += r.loss_mlm / n;
        out.loss_cl += r.loss_cl / n;
        out.loss_total += r.loss_total / n;
        out.loss_cla += r.loss_cla / n;
    }
    out
}

fn entry(stage: Stage, epoch: usize, r: LossReport, started: Instant, seed: u64) -> LogEntry {
    LogEntry {
        stage,
        epoch,
        loss_mlm: r.loss_mlm,
        loss_cl: r.loss_cl,
        loss_total: r.loss_total,
        loss_cla: r.loss_cla,
        wall_time: started.elapsed().as_secs_f64(),
        seed,
    }
}

/// A freshly initialized model at stage `cl`, epoch 0. Fine-tuning from it
/// skips contrastive pretraining altogether.
pub fn init_checkpoint(prepared: &Prepared, config: &RunConfig) -> Result<Checkpoint> {
    config.train.validate()?;
    let mut config = config.clone();
    config.encoder.vocab_size = prepared.vocab.len();
    let state = ModelState::new(config.encoder.clone(), config.train.seed)?;
    Ok(Checkpoint {
        state,
        vocab: prepared.vocab.clone(),
        config,
        stage: Stage::Cl,
        epoch: 0,
        log: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub last: Checkpoint,
    /// Lowest mean epoch loss; kept for inspection only.
    pub best: Checkpoint,
}

pub fn pretrain_cl(prepared: &Prepared, config: &RunConfig) -> Result<PretrainOutput> {
    pretrain_cl_with(prepared, config, &mut noop)
}

/// Stage one. A zero MLM weight also disables masking.
pub fn pretrain_cl_with(
    prepared: &Prepared,
    config: &RunConfig,
    hook: &mut EpochHook,
) -> Result<PretrainOutput> {
    config.encoder_for(prepared.vocab.len()).validate()?;
    config.loss.validate()?;
    let train = &prepared.split.train;
    let task = config.train.task;
    let pos = build_pos_set(train, task)?;
    let plan = config.sampling_plan();
    let seed = config.train.seed;
    let use_mlm = config.loss.lambda_mlm > 0.0;
    let train_ids = token_ids(train);

    let mut ckpt = init_checkpoint(prepared, config)?;
    let mut opt = AdamW::new(config.optimizer(), ckpt.state.params());
    let mut best: Option<(f64, Checkpoint)> = None;
    let started = Instant::now();

    for epoch in 1..=config.train.epochs_cl {
        let mut pairs = sample_pairs(train, &pos, task, &plan, epoch)?;
        pairs.shuffle(&mut rng::stream(seed, rng::SHUFFLE, epoch as u64));
        let mut mask_rng = rng::stream(seed, rng::MASKING, epoch as u64);
        let mask = |ids: &[usize], r: &mut rng::Rng| {
            if use_mlm {
                apply_mlm_mask_with(ids, config.encoder.mask_rate, r)
            } else {
                unmasked(ids)
            }
        };
        let mut reports = Vec::new();
        for (b, range) in batch_ranges(pairs.len(), config.train.batch_size)
            .into_iter()
            .enumerate()
        {
            let inputs: Vec<PairInput> = pairs[range]
                .iter()
                .map(|p| PairInput {
                    a: mask(&train[p.a].contract.token_ids, &mut mask_rng),
                    b: mask(&train[p.b].contract.token_ids, &mut mask_rng),
                    label: p.label,
                })
                .collect();
            let (grads, stats, report) = {
                let mut tape = Tape::new(ckpt.state.params());
                let (root, report) = stage1_loss(&ckpt.state, &mut tape, &inputs, &config.loss)?;
                if !report.loss_total.is_finite() {
                    return Err(ClearError::Divergence {
                        stage: "cl".into(),
                        epoch,
                        batch: b + 1,
                    });
                }
                (tape.backward(root), tape_stats(&tape), report)
            };
            apply_step(&mut ckpt.state, &mut opt, &grads, stats);
            if !ckpt.state.all_finite() {
                return Err(ClearError::Divergence {
                    stage: "cl".into(),
                    epoch,
                    batch: b + 1,
                });
            }
            reports.push(report);
        }
        recalibrate_running_stats(&mut ckpt.state, &train_ids, config.train.batch_size)?;
        let e = entry(Stage::Cl, epoch, mean_report(&reports), started, seed);
        ckpt.epoch = epoch;
        ckpt.log.push(e.clone());
        hook(&EpochEvent {
            entry: &e,
            state: &ckpt.state,
        })?;
        if best.as_ref().is_none_or(|(l, _)| e.loss_total < *l) {
            best = Some((e.loss_total, ckpt.clone()));
        }
    }
    let best = best.map(|(_, c)| c).expect("at least one epoch");
    Ok(PretrainOutput { last: ckpt, best })
}

/// Which parameter groups stage two updates.
#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    /// `None` trains every group.
    pub trainable: Option<HashSet<ParamId>>,
}

pub fn finetune(ckpt: Checkpoint, prepared: &Prepared) -> Result<Checkpoint> {
    finetune_with(ckpt, prepared, &FinetuneOptions::default(), &mut noop)
}

/// Stage two over single contracts with the checkpoint's configuration. The
/// model after the last epoch is returned.
pub fn finetune_with(
    mut ckpt: Checkpoint,
    prepared: &Prepared,
    options: &FinetuneOptions,
    hook: &mut EpochHook,
) -> Result<Checkpoint> {
    if ckpt.stage != Stage::Cl {
        return Err(ClearError::StageMismatch {
            expected: Stage::Cl.to_string(),
            found: ckpt.stage.to_string(),
        });
    }
    if ckpt.vocab.hash() != prepared.vocab.hash() {
        return Err(ClearError::Checkpoint(
            "corpus was encoded with a different vocabulary".into(),
        ));
    }
    let config = ckpt.config.clone();
    config.train.validate()?;
    let train = &prepared.split.train;
    let task = config.train.task;
    let seed = config.train.seed;
    let mut opt = AdamW::new(config.optimizer(), ckpt.state.params());
    let started = Instant::now();
    ckpt.stage = Stage::Ft;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let train_ids = token_ids(train);

    for epoch in 1..=config.train.epochs_ft {
        order.shuffle(&mut rng::stream(
            seed,
            rng::SHUFFLE,
            (1 << 32) + epoch as u64,
        ));
        let mut reports = Vec::new();
        for (b, range) in batch_ranges(order.len(), config.train.batch_size)
            .into_iter()
            .enumerate()
        {
            let batch: Vec<(&[usize], u8)> = order[range]
                .iter()
                .map(|&i| (train[i].contract.token_ids.as_slice(), train[i].label(task)))
                .collect();
            let (mut grads, stats, loss) = {
                let mut tape = Tape::new(ckpt.state.params());
                let (root, _) = stage2_loss(&ckpt.state, &mut tape, &batch)?;
                let loss = tape.scalar(root);
                if !loss.is_finite() {
                    return Err(ClearError::Divergence {
                        stage: "ft".into(),
                        epoch,
                        batch: b + 1,
                    });
                }
                (tape.backward(root), tape_stats(&tape), loss)
            };
            if let Some(keep) = &options.trainable {
                grads.retain(|id| keep.contains(&id));
            }
            apply_step(&mut ckpt.state, &mut opt, &grads, stats);
            if !ckpt.state.all_finite() {
                return Err(ClearError::Divergence {
                    stage: "ft".into(),
                    epoch,
                    batch: b + 1,
                });
            }
            reports.push(LossReport {
                loss_cla: loss,
                ..Default::default()
            });
        }
        let mut r = mean_report(&reports);
        r.loss_total = r.loss_cla;
        recalibrate_running_stats(&mut ckpt.state, &train_ids, config.train.batch_size)?;
        let e = entry(Stage::Ft, epoch, r, started, seed);
        ckpt.epoch = epoch;
        ckpt.log.push(e.clone());
        hook(&EpochEvent {
            entry: &e,
            state: &ckpt.state,
        })?;
    }
    Ok(ckpt)
}

fn token_ids(examples: &[EncodedExample]) -> Vec<&[usize]> {
    examples
        .iter()
        .map(|e| e.contract.token_ids.as_slice())
        .collect()
}

/// Replace the running batch-norm estimates with batch statistics of the
/// current parameters over unmasked `contracts`, averaged across batches of
/// `batch_size`.
pub fn recalibrate_running_stats(
    state: &mut ModelState,
    contracts: &[&[usize]],
    batch_size: usize,
) -> Result<()> {
    if !state.config().batch_norm {
        return Ok(());
    }
    if contracts.len() < 2 {
        return Err(ClearError::invalid(
            "batch statistics need at least two contracts",
        ));
    }
    let k = state.config().k;
    let (mut mean, mut var, mut total) = (vec![0.0; k], vec![0.0; k], 0usize);
    for range in batch_ranges(contracts.len(), batch_size) {
        let mut tape = Tape::new(state.params());
        let mut rows = Vec::with_capacity(range.len());
        for ids in &contracts[range] {
            rows.push(state.encode_contract(&mut tape, ids, &[])?.summary);
        }
        let stacked = tape.concat_rows(&rows);
        state.project(&mut tape, stacked, Mode::Train)?;
        let s = &tape.batch_stats()[0];
        let unbias = s.count as f64 / (s.count as f64 - 1.0);
        for j in 0..k {
            mean[j] += s.mean[j] * s.count as f64;
            var[j] += s.var[j] * unbias * s.count as f64;
        }
        total += s.count;
    }
    let running = &mut state.running;
    running.mean = mean.into_iter().map(|m| m / total as f64).collect();
    running.var = var.into_iter().map(|v| v / total as f64).collect();
    running.updates += 1;
    Ok(())
}

/// Eval-mode `v` for a list of contracts, one row each.
pub fn embed(state: &ModelState, contracts: &[&[usize]]) -> Result<Array2<f64>> {
    let k = state.config().k;
    let mut out = Array2::zeros((contracts.len(), k));
    for (i, ids) in contracts.iter().enumerate() {
        out.row_mut(i).assign(&state.encode_eval(ids)?.v);
    }
    Ok(out)
}
