//! Pair sampling for the contrastive stage.
//!
//! Every training contract is paired with a partner drawn uniformly from the
//! POS set (the vulnerable training contracts). Pairs are therefore either
//! vulnerable-vulnerable (label 1) or non-vulnerable-vulnerable (label 0);
//! non-vulnerable pairs never occur.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, Task};
use crate::error::{ClearError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relationship {
    #[serde(rename = "V-V")]
    VulnerableVulnerable,
    #[serde(rename = "V-N")]
    VulnerableNonVulnerable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    None,
    /// Drop V-V pairs.
    MaskVv,
    /// Drop V-N pairs.
    MaskVn,
}

impl Ablation {
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::MaskVv => "mvv",
            Ablation::MaskVn => "mvn",
        }
    }

    fn masks(self, rel: Relationship) -> bool {
        matches!(
            (self, rel),
            (Ablation::MaskVv, Relationship::VulnerableVulnerable)
                | (Ablation::MaskVn, Relationship::VulnerableNonVulnerable)
        )
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "mvv" => Ok(Ablation::MaskVv),
            "mvn" => Ok(Ablation::MaskVn),
            _ => Err(ClearError::invalid(format!(
                "unknown ablation {s:?} (expected none, mvv or mvn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    pub seed: u64,
    pub ablation: Ablation,
    pub resample_each_epoch: bool,
}

impl SamplingPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ablation: Ablation::None,
            resample_each_epoch: true,
        }
    }
}

/// A training pair. `a` and `b` index into the training list; `b` is always a
/// POS-set member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContractPair {
    pub a: usize,
    pub b: usize,
    pub label: u8,
    pub relationship: Relationship,
}

/// Ids of the training contracts labeled vulnerable for `task`.
pub fn build_pos_set(train: &[EncodedExample], task: Task) -> Result<BTreeSet<String>> {
    if train.is_empty() {
        return Err(ClearError::invalid("empty training set"));
    }
    let pos: BTreeSet<String> = train
        .iter()
        .filter(|ex| ex.label(task) == 1)
        .map(|ex| ex.id().to_string())
        .collect();
    if pos.is_empty() {
        return Err(ClearError::EmptyPosSet(task.to_string()));
    }
    Ok(pos)
}

/// Correlation label of a pair whose second member comes from the POS set:
/// 1 for V-V, 0 for V-N.
pub fn correlation_label(label_a: u8, label_b: u8) -> Result<u8> {
    match (label_a, label_b) {
        (_, 0) => Err(ClearError::NegativePair),
        (1, 1) => Ok(1),
        (0, 1) => Ok(0),
        _ => Err(ClearError::invalid(format!(
            "labels must be binary, got ({label_a}, {label_b})"
        ))),
    }
}

/// Pair every training contract with a uniformly drawn POS member.
///
/// `epoch` selects the random stream when the plan resamples each epoch;
/// otherwise the same pairs are produced for every epoch.
pub fn sample_pairs(
    train: &[EncodedExample],
    pos_set: &BTreeSet<String>,
    task: Task,
    plan: &SamplingPlan,
    epoch: usize,
) -> Result<Vec<ContractPair>> {
    let pos_idx: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, ex)| pos_set.contains(ex.id()))
        .map(|(i, _)| i)
        .collect();
    if pos_idx.is_empty() {
        return Err(ClearError::EmptyPosSet(task.to_string()));
    }
    let stream = if plan.resample_each_epoch {
        epoch as u64
    } else {
        0
    };
    let mut rng = rng::stream(plan.seed, rng::PAIRS, stream);
    let mut pairs = Vec::with_capacity(train.len());
    for (a, ex) in train.iter().enumerate() {
        let b = pos_idx[rng.gen_range(0..pos_idx.len())];
        let label = correlation_label(ex.label(task), train[b].label(task))?;
        let relationship = if label == 1 {
            Relationship::VulnerableVulnerable
        } else {
            Relationship::VulnerableNonVulnerable
        };
        if !plan.ablation.masks(relationship) {
            pairs.push(ContractPair {
                a,
                b,
                label,
                relationship,
            });
        }
    }
    Ok(pairs)
}
