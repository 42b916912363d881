use ndarray::Array2;

use crate::autograd::{ParamId, ParamStore, Tape, Var};

use super::{init_uniform, EncoderKind, Rng};

/// Unidirectional recurrent encoder (plain RNN, LSTM or GRU) plus the linear
/// map from the final hidden state to the summary vector.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    kind: EncoderKind,
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
    summary_w: ParamId,
    summary_b: ParamId,
}

fn gate_count(kind: EncoderKind) -> usize {
    match kind {
        EncoderKind::Rnn => 1,
        EncoderKind::Gru => 3,
        EncoderKind::Lstm => 4,
        EncoderKind::Transformer => unreachable!("not a recurrent kind"),
    }
}

impl RecurrentEncoder {
    pub(super) fn init(store: &mut ParamStore, kind: EncoderKind, k: usize, rng: &mut Rng) -> Self {
        let g = gate_count(kind) * k;
        let w_x = store.add("rnn.w_x", init_uniform(k, g, k, rng));
        let w_h = store.add("rnn.w_h", init_uniform(k, g, k, rng));
        let mut b_x = Array2::zeros((1, g));
        if kind == EncoderKind::Lstm {
            // forget-gate bias starts at 1
            b_x.slice_mut(ndarray::s![.., k..2 * k]).fill(1.0);
        }
        let b_x = store.add("rnn.b_x", b_x);
        let b_h = store.add("rnn.b_h", Array2::zeros((1, g)));
        let summary_w = store.add("rnn.summary.w", init_uniform(k, k, k, rng));
        let summary_b = store.add("rnn.summary.b", Array2::zeros((1, k)));
        Self {
            kind,
            w_x,
            w_h,
            b_x,
            b_h,
            summary_w,
            summary_b,
        }
    }

    pub(super) fn bind(store: &ParamStore, kind: EncoderKind) -> Option<Self> {
        let p = |name: &str| store.lookup(name);
        Some(Self {
            kind,
            w_x: p("rnn.w_x")?,
            w_h: p("rnn.w_h")?,
            b_x: p("rnn.b_x")?,
            b_h: p("rnn.b_h")?,
            summary_w: p("rnn.summary.w")?,
            summary_b: p("rnn.summary.b")?,
        })
    }

    /// Runs over the first `valid` rows of `x`. Returns `(summary, F)` where F
    /// stacks the per-step hidden states.
    pub fn forward(&self, tape: &mut Tape, x: Var, valid: usize) -> (Var, Var) {
        let k = tape.value(x).ncols();
        let xs = tape.slice_rows(x, 0, valid);
        let (w_x, w_h, b_x, b_h) = (
            tape.param(self.w_x),
            tape.param(self.w_h),
            tape.param(self.b_x),
            tape.param(self.b_h),
        );
        let xw = tape.matmul(xs, w_x);
        let xw = tape.add_row(xw, b_x);
        let mut h = tape.constant(Array2::zeros((1, k)));
        let mut c = tape.constant(Array2::zeros((1, k)));
        let mut states = Vec::with_capacity(valid);
        for t in 0..valid {
            let xt = tape.slice_rows(xw, t, 1);
            let hw = tape.matmul(h, w_h);
            let hw = tape.add_row(hw, b_h);
            h = match self.kind {
                EncoderKind::Rnn => {
                    let pre = tape.add(xt, hw);
                    tape.tanh(pre)
                }
                EncoderKind::Lstm => {
                    let pre = tape.add(xt, hw);
                    let gate = |tape: &mut Tape, j: usize| tape.slice_cols(pre, j * k, k);
                    let (i_pre, f_pre, g_pre, o_pre) =
                        (gate(tape, 0), gate(tape, 1), gate(tape, 2), gate(tape, 3));
                    let i = tape.sigmoid(i_pre);
                    let f = tape.sigmoid(f_pre);
                    let g = tape.tanh(g_pre);
                    let o = tape.sigmoid(o_pre);
                    let fc = tape.mul(f, c);
                    let ig = tape.mul(i, g);
                    c = tape.add(fc, ig);
                    let tc = tape.tanh(c);
                    tape.mul(o, tc)
                }
                EncoderKind::Gru => {
                    let xg = |tape: &mut Tape, j: usize| tape.slice_cols(xt, j * k, k);
                    let hg = |tape: &mut Tape, j: usize| tape.slice_cols(hw, j * k, k);
                    let (xr, xz, xn) = (xg(tape, 0), xg(tape, 1), xg(tape, 2));
                    let (hr, hz, hn) = (hg(tape, 0), hg(tape, 1), hg(tape, 2));
                    let r_pre = tape.add(xr, hr);
                    let r = tape.sigmoid(r_pre);
                    let z_pre = tape.add(xz, hz);
                    let z = tape.sigmoid(z_pre);
                    let rhn = tape.mul(r, hn);
                    let n_pre = tape.add(xn, rhn);
                    let n = tape.tanh(n_pre);
                    let keep = tape.one_minus(z);
                    let a = tape.mul(keep, n);
                    let b = tape.mul(z, h);
                    tape.add(a, b)
                }
                EncoderKind::Transformer => unreachable!(),
            };
            states.push(h);
        }
        let features = tape.concat_rows(&states);
        let (sw, sb) = (tape.param(self.summary_w), tape.param(self.summary_b));
        let summary = tape.matmul(h, sw);
        let summary = tape.add_row(summary, sb);
        (summary, features)
    }
}
