//! Flat `key = value` run configuration.
//!
//! Every key has a default (the desk preset), so a file only needs the keys it
//! changes. Unknown and repeated keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MIN_FREQUENCY;
use crate::encoder::{EncoderConfig, EncoderKind, ProjectionNorm};
use crate::error::{ClearError, Result};
use crate::objectives::LossConfig;
use crate::optim::AdamWConfig;
use crate::sampling::{Ablation, SamplingPlan};
use crate::training::TrainConfig;

pub const KEYS: [&str; 31] = [
    "seed",
    "task",
    "device",
    "optimizer",
    "learning_rate",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "epochs_cl",
    "epochs_ft",
    "k",
    "heads",
    "layers_mlm",
    "layers_feat",
    "ff_dim",
    "max_len",
    "mask_rate",
    "encoder",
    "projection_norm",
    "batch_norm",
    "bn_momentum",
    "margin",
    "lambda_cl",
    "lambda_mlm",
    "ablation",
    "resample_each_epoch",
    "split_ratio",
    "min_frequency",
    "threshold",
];

/// Everything a run needs besides the corpus. `encoder.vocab_size` is filled
/// in once the vocabulary is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub resample_each_epoch: bool,
    pub split_ratio: f64,
    pub min_frequency: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            encoder: EncoderConfig::desk(0),
            // sqrt(2k): expected distance between two independent batch-normalized rows at k=32
            loss: LossConfig {
                margin: 8.0,
                ..LossConfig::default()
            },
            ablation: Ablation::None,
            resample_each_epoch: true,
            split_ratio: 0.8,
            min_frequency: DEFAULT_MIN_FREQUENCY,
            threshold: 0.5,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            train: TrainConfig::full_scale(),
            encoder: EncoderConfig::full_scale(0),
            loss: LossConfig::default(),
            ..Self::desk()
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        SamplingPlan {
            seed: self.train.seed,
            ablation: self.ablation,
            resample_each_epoch: self.resample_each_epoch,
        }
    }

    pub fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.adam_beta1,
            beta2: self.train.adam_beta2,
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train.learning_rate > 0.0) {
            return Err(ClearError::invalid("learning_rate must be positive"));
        }
        self.encoder_for(crate::corpus::MASK_ID + 1).validate()?;
        self.loss.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(ClearError::invalid("split_ratio must lie in (0, 1)"));
        }
        if self.min_frequency == 0 {
            return Err(ClearError::invalid("min_frequency must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ClearError::invalid("threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let e = &self.encoder;
        match key {
            "seed" => t.seed.to_string(),
            "task" => t.task.to_string(),
            "device" => t.device.clone(),
            "optimizer" => t.optimizer.clone(),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs_cl" => t.epochs_cl.to_string(),
            "epochs_ft" => t.epochs_ft.to_string(),
            "k" => e.k.to_string(),
            "heads" => e.heads.to_string(),
            "layers_mlm" => e.layers_mlm.to_string(),
            "layers_feat" => e.layers_feat.to_string(),
            "ff_dim" => e.ff_dim.to_string(),
            "max_len" => e.max_len.to_string(),
            "mask_rate" => e.mask_rate.to_string(),
            "encoder" => e.encoder_kind.tag().to_string(),
            "projection_norm" => e.projection_norm.tag().to_string(),
            "batch_norm" => e.batch_norm.to_string(),
            "bn_momentum" => e.bn_momentum.to_string(),
            "margin" => self.loss.margin.to_string(),
            "lambda_cl" => self.loss.lambda_cl.to_string(),
            "lambda_mlm" => self.loss.lambda_mlm.to_string(),
            "ablation" => self.ablation.tag().to_string(),
            "resample_each_epoch" => self.resample_each_epoch.to_string(),
            "split_ratio" => self.split_ratio.to_string(),
            "min_frequency" => self.min_frequency.to_string(),
            "threshold" => self.threshold.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Assign one key. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| ClearError::invalid(format!("invalid value {value:?} for {key}")))
        }
        let t = &mut self.train;
        let e = &mut self.encoder;
        match key {
            "seed" => t.seed = num(key, value)?,
            "task" => t.task = value.parse()?,
            "device" => t.device = value.to_string(),
            "optimizer" => t.optimizer = value.to_string(),
            "learning_rate" => t.learning_rate = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs_cl" => t.epochs_cl = num(key, value)?,
            "epochs_ft" => t.epochs_ft = num(key, value)?,
            "k" => e.k = num(key, value)?,
            "heads" => e.heads = num(key, value)?,
            "layers_mlm" => e.layers_mlm = num(key, value)?,
            "layers_feat" => e.layers_feat = num(key, value)?,
            "ff_dim" => e.ff_dim = num(key, value)?,
            "max_len" => e.max_len = num(key, value)?,
            "mask_rate" => e.mask_rate = num(key, value)?,
            "encoder" => e.encoder_kind = EncoderKind::from_str(value)?,
            "projection_norm" => e.projection_norm = ProjectionNorm::from_str(value)?,
            "batch_norm" => e.batch_norm = num(key, value)?,
            "bn_momentum" => e.bn_momentum = num(key, value)?,
            "margin" => self.loss.margin = num(key, value)?,
            "lambda_cl" => self.loss.lambda_cl = num(key, value)?,
            "lambda_mlm" => self.loss.lambda_mlm = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "resample_each_epoch" => self.resample_each_epoch = num(key, value)?,
            "split_ratio" => self.split_ratio = num(key, value)?,
            "min_frequency" => self.min_frequency = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parse on top of the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::desk(), text)
    }

    pub fn parse_over(mut base: Self, text: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ClearError::Parse {
                    line: line_no,
                    message: "expected key = value".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ClearError::Parse {
                    line: line_no,
                    message: format!("repeated key {key}"),
                });
            }
            let known = base.set(key, value).map_err(|e| ClearError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if !known {
                return Err(ClearError::UnknownConfigKey {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClearError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Key/value pairs for manifests.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Task;

    #[test]
    fn preset_files_match_presets() {
        let desk = include_str!("../../../presets/desk.cfg");
        let full = include_str!("../../../presets/full.cfg");
        assert_eq!(RunConfig::parse(desk).unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::parse(full).unwrap(), RunConfig::full_scale());
    }

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::full_scale()] {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let mut odd = RunConfig::desk();
        odd.train.learning_rate = 0.1 + 0.2;
        odd.encoder.encoder_kind = EncoderKind::Gru;
        odd.ablation = Ablation::MaskVn;
        assert_eq!(RunConfig::parse(&odd.to_text()).unwrap(), odd);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = RunConfig::parse("# header\n\nseed = 11 # trailing\ntask=RE\n").unwrap();
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.train.task, Task::Reentrancy);
        assert_eq!(cfg.encoder, RunConfig::desk().encoder);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        match RunConfig::parse("seed = 1\nlearning_rat = 0.1\n") {
            Err(ClearError::UnknownConfigKey { key, line }) => {
                assert_eq!(key, "learning_rat");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ClearError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed 1"),
            Err(ClearError::Parse { line: 1, .. })
        ));
        assert!(RunConfig::parse("k = many").is_err());
        assert!(RunConfig::parse("learning_rate = 0").is_err());
        assert!(RunConfig::parse("heads = 5").is_err());
    }

    #[test]
    fn keys_are_complete() {
        let cfg = RunConfig::desk();
        for key in KEYS {
            let mut copy = cfg.clone();
            assert!(copy.set(key, &cfg.get(key)).unwrap(), "{key}");
            assert_eq!(copy, cfg);
        }
    }
}
