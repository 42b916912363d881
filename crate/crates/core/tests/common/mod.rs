#![allow(dead_code)]

use clear_core::autograd::{ParamId, Tape};
use clear_core::encoder::{EncoderConfig, MaskedBatch, ModelState};
use clear_core::objectives::LossConfig;
use clear_core::training::{stage1_loss, stage2_loss, PairInput};

/// Reduced model used by the finite-difference checks.
pub fn tiny_state(seed: u64) -> ModelState {
    let cfg = EncoderConfig {
        k: 8,
        heads: 2,
        layers_mlm: 1,
        layers_feat: 1,
        ff_dim: 16,
        max_len: 8,
        vocab_size: 12,
        ..EncoderConfig::desk(12)
    };
    ModelState::new(cfg, seed).unwrap()
}

fn masked(ids: &[usize], positions: &[usize]) -> MaskedBatch {
    let mut masked_ids = ids.to_vec();
    for &p in positions {
        masked_ids[p] = clear_core::corpus::MASK_ID;
    }
    MaskedBatch {
        masked_ids,
        target_ids: ids.to_vec(),
        mask_positions: positions.to_vec(),
    }
}

pub fn stage1_batch() -> Vec<PairInput> {
    vec![
        PairInput {
            a: masked(&[3, 4, 5, 6, 7, 8], &[1, 4]),
            b: masked(&[9, 10, 3, 11, 0, 0], &[2]),
            label: 1,
        },
        PairInput {
            a: masked(&[5, 5, 7, 9, 11, 0], &[0, 3]),
            b: masked(&[4, 8, 6, 10, 3, 7], &[5]),
            label: 0,
        },
    ]
}

pub fn stage2_batch() -> Vec<(Vec<usize>, u8)> {
    vec![
        (vec![3, 4, 5, 6, 7, 8], 1),
        (vec![9, 10, 3, 11, 0, 0], 0),
        (vec![5, 7, 7, 9, 0, 0], 1),
    ]
}

/// Margin far from every pair distance at the tiny model's initialization.
pub const CHECK_LOSS: LossConfig = LossConfig {
    margin: 6.0,
    lambda_cl: 1.0,
    lambda_mlm: 0.1,
};

pub fn stage1_value(state: &ModelState) -> f64 {
    let mut tape = Tape::new(state.params());
    let (loss, _) = stage1_loss(state, &mut tape, &stage1_batch(), &CHECK_LOSS).unwrap();
    tape.scalar(loss)
}

pub fn stage2_value(state: &ModelState) -> f64 {
    let batch = stage2_batch();
    let refs: Vec<(&[usize], u8)> = batch.iter().map(|(ids, y)| (ids.as_slice(), *y)).collect();
    let mut tape = Tape::new(state.params());
    let (loss, _) = stage2_loss(state, &mut tape, &refs).unwrap();
    tape.scalar(loss)
}

fn analytic(state: &ModelState, stage: u8) -> clear_core::autograd::Gradients {
    let mut tape = Tape::new(state.params());
    let loss = if stage == 1 {
        stage1_loss(state, &mut tape, &stage1_batch(), &CHECK_LOSS)
            .unwrap()
            .0
    } else {
        let batch = stage2_batch();
        let refs: Vec<(&[usize], u8)> = batch.iter().map(|(ids, y)| (ids.as_slice(), *y)).collect();
        stage2_loss(state, &mut tape, &refs).unwrap().0
    };
    tape.backward(loss)
}

/// Gradient norm below which a group counts as having no gradient.
pub const ZERO_FLOOR: f64 = 1e-8;

/// Relative error `|a - n| / max(|a|, |n|)` per parameter group, comparing the
/// tape gradient with central differences. Groups whose gradient vanishes
/// identically report 0: attention key biases and the projection's LayerNorm
/// shift are cancelled by the softmax and by batch normalization, and heads
/// unused by a stage receive nothing.
pub fn gradient_errors(stage: u8) -> Vec<(String, f64)> {
    let mut state = tiny_state(5);
    let value = if stage == 1 {
        stage1_value
    } else {
        stage2_value
    };
    let grads = analytic(&state, stage);
    let h = 1e-5;
    let ids: Vec<ParamId> = state.params().ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let name = state.params().name(id).to_string();
        let shape = state.params().get(id).raw_dim();
        let cols = shape[1];
        let count = state.params().get(id).len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for idx in 0..count {
            let (r, c) = (idx / cols, idx % cols);
            let orig = state.params().get(id)[[r, c]];
            state.params_mut().get_mut(id)[[r, c]] = orig + h;
            let up = value(&state);
            state.params_mut().get_mut(id)[[r, c]] = orig - h;
            let down = value(&state);
            state.params_mut().get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads.get(id).map_or(0.0, |g| g[[r, c]]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        out.push((
            name,
            if scale < ZERO_FLOOR {
                0.0
            } else {
                diff2.sqrt() / scale
            },
        ));
    }
    out
}
