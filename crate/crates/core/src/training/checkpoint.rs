//! Checkpoint directories.
//!
//! ```text
//! manifest.json   stage, epoch, config, parameter names/shapes, running statistics
//! vocab.txt       vocabulary table
//! params.bin      parameters in manifest order, little-endian f64
//! log.jsonl       training log
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, LogEntry, Stage};
use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::encoder::{ModelState, RunningStats};
use crate::error::{ClearError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "clear-checkpoint";

#[derive(Serialize, Deserialize)]
struct Group {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    stage: Stage,
    epoch: usize,
    vocab_hash: String,
    params_sha256: String,
    config: RunConfig,
    groups: Vec<Group>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    running_updates: u64,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ClearError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ClearError::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ClearError::io(dir, e))?;
    let params = ckpt.state.params();
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut groups = Vec::with_capacity(params.len());
    for id in params.ids() {
        let a = params.get(id);
        groups.push(Group {
            name: params.name(id).to_string(),
            shape: [a.nrows(), a.ncols()],
        });
        for &x in a.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        vocab_hash: ckpt.vocab.hash(),
        params_sha256: hex::encode(Sha256::digest(&blob)),
        config: ckpt.config.clone(),
        groups,
        running_mean: ckpt.state.running.mean.clone(),
        running_var: ckpt.state.running.var.clone(),
        running_updates: ckpt.state.running.updates,
    };
    let mut log = String::new();
    for e in &ckpt.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write(
        &dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    write(&dir.join("vocab.txt"), ckpt.vocab.to_text().as_bytes())?;
    write(&dir.join("params.bin"), &blob)?;
    write(&dir.join("log.jsonl"), log.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| ClearError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(ClearError::Checkpoint(format!(
            "not a checkpoint manifest: {}",
            manifest_path.display()
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ClearError::Checkpoint(format!(
            "version mismatch: file has {}, expected {CHECKPOINT_VERSION}",
            manifest.version
        )));
    }
    let vocab_path = dir.join("vocab.txt");
    let vocab = Vocabulary::from_text(&String::from_utf8_lossy(&read(&vocab_path)?))?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(ClearError::Checkpoint(
            "vocabulary file does not match the manifest hash".into(),
        ));
    }
    if manifest.config.encoder.vocab_size != vocab.len() {
        return Err(ClearError::Checkpoint(
            "config vocab_size disagrees with the vocabulary".into(),
        ));
    }
    let blob = read(&dir.join("params.bin"))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.params_sha256 {
        return Err(ClearError::Checkpoint("params.bin digest mismatch".into()));
    }
    let expected: usize = manifest
        .groups
        .iter()
        .map(|g| g.shape[0] * g.shape[1] * 8)
        .sum();
    if blob.len() != expected {
        return Err(ClearError::Checkpoint(format!(
            "params.bin has {} bytes, expected {expected}",
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for g in &manifest.groups {
        let n = g.shape[0] * g.shape[1];
        let values: Vec<f64> = blob[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        let a = Array2::from_shape_vec((g.shape[0], g.shape[1]), values)
            .map_err(|e| ClearError::Checkpoint(e.to_string()))?;
        if store.lookup(&g.name).is_some() {
            return Err(ClearError::Checkpoint(format!(
                "repeated parameter group {}",
                g.name
            )));
        }
        store.add(g.name.clone(), a);
    }
    let running = RunningStats {
        mean: manifest.running_mean,
        var: manifest.running_var,
        updates: manifest.running_updates,
    };
    let state = ModelState::from_parts(manifest.config.encoder.clone(), store, running)?;
    let log_path = dir.join("log.jsonl");
    let log_text = String::from_utf8_lossy(&read(&log_path)?).into_owned();
    let log = log_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<LogEntry>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Checkpoint {
        state,
        vocab,
        config: manifest.config,
        stage: manifest.stage,
        epoch: manifest.epoch,
        log,
    })
}

/// Load and require the checkpoint's vocabulary to be `vocab`.
pub fn load_checkpoint_with_vocab(dir: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.vocab.hash() != vocab.hash() {
        return Err(ClearError::Checkpoint(format!(
            "vocabulary hash {} differs from expected {}",
            ckpt.vocab.hash(),
            vocab.hash()
        )));
    }
    Ok(ckpt)
}
