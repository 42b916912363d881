//! Labeled contract corpora: ingestion, tokenization, vocabularies, splits and
//! the synthetic generator used for desk-scale experiments.

mod lexer;
mod synth;
mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClearError, Result};
use crate::rng;

pub use lexer::{tokenize, NUM_TOKEN, STR_TOKEN};
pub use synth::{generate_contract, generate_synthetic_corpus, SynthContract};
pub use vocab::{
    build_vocabulary, corpus_token_hash, Vocabulary, DEFAULT_MIN_FREQUENCY, MASK_ID, PAD_ID,
    RESERVED, UNK_ID,
};

pub const DEFAULT_MAX_LEN: usize = 512;

/// Vulnerability type a binary label refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "RE")]
    Reentrancy,
    #[serde(rename = "TD")]
    TimestampDependence,
    #[serde(rename = "IO")]
    IntegerOverflow,
    /// Statement-order label emitted by the synthetic generator.
    #[serde(rename = "ORDER")]
    Order,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Reentrancy,
        Task::TimestampDependence,
        Task::IntegerOverflow,
        Task::Order,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Reentrancy => "RE",
            Task::TimestampDependence => "TD",
            Task::IntegerOverflow => "IO",
            Task::Order => "ORDER",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.tag() == s).ok_or_else(|| {
            ClearError::invalid(format!("unknown task {s:?} (expected RE, TD, IO or ORDER)"))
        })
    }
}

pub type Labels = BTreeMap<Task, u8>;

/// One contract with its per-type binary labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub source: String,
    pub labels: Labels,
}

impl LabeledExample {
    pub fn label(&self, task: Task) -> Option<u8> {
        self.labels.get(&task).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedContract {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub original_length: usize,
}

impl EncodedContract {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Map tokens to ids, truncating from the tail. Empty input encodes to a single UNK.
pub fn encode(id: &str, tokens: &[String], vocab: &Vocabulary, max_len: usize) -> EncodedContract {
    let max_len = max_len.max(1);
    let mut token_ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect();
    if token_ids.is_empty() {
        token_ids.push(UNK_ID);
    }
    EncodedContract {
        id: id.to_string(),
        token_ids,
        original_length: tokens.len(),
    }
}

/// An encoded contract together with its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub contract: EncodedContract,
    pub labels: Labels,
}

impl EncodedExample {
    pub fn id(&self) -> &str {
        &self.contract.id
    }

    /// Binary label for `task`; contracts without a label for it count as non-vulnerable.
    pub fn label(&self, task: Task) -> u8 {
        self.labels.get(&task).copied().unwrap_or(0)
    }
}

pub fn encode_corpus(
    examples: &[LabeledExample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|ex| EncodedExample {
            contract: encode(&ex.id, &tokenize(&ex.source), vocab, max_len),
            labels: ex.labels.clone(),
        })
        .collect()
}

fn parse_line(line: &str, lineno: usize) -> Result<LabeledExample> {
    let err = |message: String| ClearError::Parse {
        line: lineno,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| err(format!("malformed JSON ({e})")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record is not a JSON object".into()))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "id" | "source" | "labels") {
            return Err(err(format!("unknown field {key}")));
        }
    }
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| err(format!("missing field {name}")))
    };
    let id = field("id")?
        .as_str()
        .ok_or_else(|| err("field id must be a string".into()))?
        .to_string();
    let source = field("source")?
        .as_str()
        .ok_or_else(|| err("field source must be a string".into()))?
        .to_string();
    let raw_labels = field("labels")?
        .as_object()
        .ok_or_else(|| err("field labels must be an object".into()))?;
    if raw_labels.is_empty() {
        return Err(err("labels must contain at least one tag".into()));
    }
    let mut labels = Labels::new();
    for (key, v) in raw_labels {
        let task: Task = key
            .parse()
            .map_err(|_| err(format!("unknown label key {key}")))?;
        let bit = match v.as_u64() {
            Some(b @ (0 | 1)) => b as u8,
            _ => return Err(err(format!("label {key} must be 0 or 1"))),
        };
        labels.insert(task, bit);
    }
    Ok(LabeledExample { id, source, labels })
}

/// Read a JSON Lines corpus. Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_corpus(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path).map_err(|e| ClearError::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        ClearError::Io { source, .. } => ClearError::io(path, source),
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<LabeledExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ClearError::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, i + 1)?;
        if !seen.insert(ex.id.clone()) {
            return Err(ClearError::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn corpus_to_jsonl(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("corpus records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| ClearError::io(path, e))?;
    file.write_all(corpus_to_jsonl(examples).as_bytes())
        .map_err(|e| ClearError::io(path, e))
}

pub fn corpus_hash(examples: &[LabeledExample]) -> String {
    hex::encode(&Sha256::digest(corpus_to_jsonl(examples).as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded random partition: `floor(ratio * N)` items go to train (clamped so
/// neither side is empty).
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<CorpusSplit<T>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ClearError::invalid(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = items.len();
    if n < 2 {
        return Err(ClearError::invalid(format!(
            "cannot split a corpus of {n} example(s)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT, 0));
    let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        seed,
        ratio,
    })
}

/// Digest over the ids of a split, used to assert that experiments share a test set.
pub fn split_hash(split: &CorpusSplit<EncodedExample>) -> String {
    let mut h = Sha256::new();
    for (tag, part) in [(b"train", &split.train), (b"test_", &split.test)] {
        h.update(tag);
        for ex in part {
            h.update(ex.id().as_bytes());
            h.update([0u8]);
        }
    }
    hex::encode(&h.finalize()[..8])
}
