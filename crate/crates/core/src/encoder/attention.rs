use ndarray::Array2;

use crate::autograd::{ParamId, ParamStore, Tape, Var};

use super::{init_uniform, Rng};

/// Parameters of one post-norm Transformer layer.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

impl AttentionLayer {
    pub(super) fn init(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        ff: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut w = |name: &str, rows: usize, cols: usize| {
            store.add(
                format!("{prefix}.{name}"),
                init_uniform(rows, cols, rows, rng),
            )
        };
        let (wq, wk, wv, wo) = (w("wq", k, k), w("wk", k, k), w("wv", k, k), w("wo", k, k));
        let ff1_w = w("ff1.w", k, ff);
        let ff2_w = w("ff2.w", ff, k);
        let mut z = |name: &str, cols: usize| {
            store.add(format!("{prefix}.{name}"), Array2::zeros((1, cols)))
        };
        let (bq, bk, bv, bo) = (z("bq", k), z("bk", k), z("bv", k), z("bo", k));
        let (ff1_b, ff2_b) = (z("ff1.b", ff), z("ff2.b", k));
        let (ln1_beta, ln2_beta) = (z("ln1.beta", k), z("ln2.beta", k));
        let mut one = |name: &str| store.add(format!("{prefix}.{name}"), Array2::ones((1, k)));
        let (ln1_gamma, ln2_gamma) = (one("ln1.gamma"), one("ln2.gamma"));
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_gamma,
            ln1_beta,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            ln2_gamma,
            ln2_beta,
        }
    }

    pub(super) fn bind(store: &ParamStore, prefix: &str) -> Option<Self> {
        let p = |name: &str| store.lookup(&format!("{prefix}.{name}"));
        Some(Self {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
            ln1_gamma: p("ln1.gamma")?,
            ln1_beta: p("ln1.beta")?,
            ff1_w: p("ff1.w")?,
            ff1_b: p("ff1.b")?,
            ff2_w: p("ff2.w")?,
            ff2_b: p("ff2.b")?,
            ln2_gamma: p("ln2.gamma")?,
            ln2_beta: p("ln2.beta")?,
        })
    }

    fn linear(tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (tape.param(w), tape.param(b));
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    /// One layer over `x` (rows = positions). Only the first `valid` positions
    /// are attended to.
    pub fn forward(&self, tape: &mut Tape, x: Var, heads: usize, valid: usize) -> Var {
        let k = tape.value(x).ncols();
        let dh = k / heads;
        let q = Self::linear(tape, x, self.wq, self.bq);
        let kk = Self::linear(tape, x, self.wk, self.bk);
        let v = Self::linear(tape, x, self.wv, self.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(kk, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, valid);
            outs.push(tape.matmul(probs, vh));
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let attn = Self::linear(tape, cat, self.wo, self.bo);
        let res = tape.add(x, attn);
        let (g1, b1) = (tape.param(self.ln1_gamma), tape.param(self.ln1_beta));
        let x1 = tape.layer_norm(res, g1, b1);
        let hidden = Self::linear(tape, x1, self.ff1_w, self.ff1_b);
        let hidden = tape.gelu(hidden);
        let ff = Self::linear(tape, hidden, self.ff2_w, self.ff2_b);
        let res2 = tape.add(x1, ff);
        let (g2, b2) = (tape.param(self.ln2_gamma), tape.param(self.ln2_beta));
        tape.layer_norm(res2, g2, b2)
    }
}
