use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ClearError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["<PAD>", "<UNK>", "<MASK>"];

pub const DEFAULT_MIN_FREQUENCY: usize = 2;

/// Dense token table with the reserved entries pinned at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
    corpus_hash: String,
}

impl Vocabulary {
    pub fn from_tokens(
        tokens: Vec<String>,
        min_frequency: usize,
        corpus_hash: String,
    ) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(ClearError::invalid(
                "vocabulary must start with <PAD>, <UNK>, <MASK>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(ClearError::invalid(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_frequency,
            corpus_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    /// Short hex digest identifying the table contents.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# min_frequency={} corpus_hash={}\n",
            self.min_frequency, self.corpus_hash
        );
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ClearError::Parse {
            line: 1,
            message: "missing vocabulary header".into(),
        })?;
        let mut min_frequency = None;
        let mut corpus_hash = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("min_frequency", v)) => {
                    min_frequency = Some(v.parse().map_err(|_| ClearError::Parse {
                        line: 1,
                        message: format!("bad min_frequency {v:?}"),
                    })?)
                }
                Some(("corpus_hash", v)) => corpus_hash = Some(v.to_string()),
                _ => {}
            }
        }
        let (Some(min_frequency), Some(corpus_hash)) = (min_frequency, corpus_hash) else {
            return Err(ClearError::Parse {
                line: 1,
                message: "malformed vocabulary header".into(),
            });
        };
        Self::from_tokens(
            lines.map(str::to_string).collect(),
            min_frequency,
            corpus_hash,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| ClearError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClearError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Digest of a tokenized corpus, recorded in the vocabulary header.
pub fn corpus_token_hash(corpus: &[Vec<String>]) -> String {
    let mut h = Sha256::new();
    for seq in corpus {
        for t in seq {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([0x1eu8]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Fit a vocabulary: reserved ids first, then tokens by descending frequency with
/// lexicographic tie-breaks. Tokens seen fewer than `min_frequency` times are left out.
pub fn build_vocabulary(corpus: &[Vec<String>], min_frequency: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(ClearError::invalid(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten() {
        if !RESERVED.contains(&tok.as_str()) {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_frequency)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_frequency, corpus_token_hash(corpus))
}
