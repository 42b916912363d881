//! Probability and verdict for single contracts.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::corpus::{encode, tokenize, Task};
use crate::encoder::{EncoderOutput, ModelState};
use crate::error::{ClearError, Result};
use crate::training::{Checkpoint, Stage};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: Task,
    pub probability: f64,
    pub verdict: u8,
    pub threshold: f64,
}

/// `σ(W3 · (AvgPool(F) ⊕ v) + b)`, pooling over the first `valid` rows of `features`.
pub fn classify(
    features: &Array2<f64>,
    valid: usize,
    v: &Array1<f64>,
    state: &ModelState,
) -> Result<f64> {
    let k = state.config().k;
    if valid == 0 || valid > features.nrows() {
        return Err(ClearError::invalid("feature matrix has no valid rows"));
    }
    if features.ncols() != k || v.len() != k {
        return Err(ClearError::invalid(format!("expected width {k}")));
    }
    let pooled = features.slice(s![..valid, ..]).sum_axis(ndarray::Axis(0)) / valid as f64;
    let [w, b] = state.classifier_ids();
    let w = state.params().get(w).column(0);
    let z =
        pooled.dot(&w.slice(s![..k])) + v.dot(&w.slice(s![k..])) + state.params().get(b)[[0, 0]];
    Ok(sigmoid(z))
}

pub fn classify_output(out: &EncoderOutput, state: &ModelState) -> Result<f64> {
    classify(&out.features, out.valid, &out.v, state)
}

/// 1 when `probability ≥ threshold`.
pub fn predict(probability: f64, threshold: f64) -> u8 {
    u8::from(probability >= threshold)
}

/// Eval-mode probability for already encoded token ids.
pub fn score(state: &ModelState, ids: &[usize]) -> Result<f64> {
    classify_output(&state.encode_eval(ids)?, state)
}

fn require_trained(ckpt: &Checkpoint, task: Task) -> Result<()> {
    if ckpt.stage != Stage::Ft {
        return Err(ClearError::StageMismatch {
            expected: Stage::Ft.to_string(),
            found: ckpt.stage.to_string(),
        });
    }
    if ckpt.config.train.task != task {
        return Err(ClearError::invalid(format!(
            "model was fine-tuned for {}, not {task}",
            ckpt.config.train.task
        )));
    }
    Ok(())
}

/// Tokenize, encode and score one source text with a fine-tuned model.
pub fn detect(id: &str, source: &str, ckpt: &Checkpoint, task: Task) -> Result<Prediction> {
    require_trained(ckpt, task)?;
    let contract = encode(
        id,
        &tokenize(source),
        &ckpt.vocab,
        ckpt.config.encoder.max_len,
    );
    let probability = score(&ckpt.state, &contract.token_ids)?;
    let threshold = ckpt.config.threshold;
    Ok(Prediction {
        id: id.to_string(),
        task,
        probability,
        verdict: predict(probability, threshold),
        threshold,
    })
}
