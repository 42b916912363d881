//! Loss terms and their analytic gradients.
//!
//! Each loss is a plain function over slices/arrays so that it can be checked
//! against scalar oracles in isolation; the autograd tape calls the `*_grad`
//! companions during the backward pass.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ClearError, Result};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before the log in the
/// classification loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_cl: f64,
    pub lambda_mlm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda_cl: 1.0,
            lambda_mlm: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(ClearError::invalid("margin must be positive"));
        }
        if !(self.lambda_cl >= 0.0 && self.lambda_mlm >= 0.0) {
            return Err(ClearError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Per-batch or per-epoch loss values. Terms that do not apply to a stage are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_mlm: f64,
    pub loss_cl: f64,
    pub loss_total: f64,
    pub loss_cla: f64,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn check_mlm_shapes(
    logits: &ArrayView2<f64>,
    target_ids: &[usize],
    mask_positions: &[usize],
) -> Result<()> {
    if mask_positions.is_empty() {
        return Err(ClearError::invalid(
            "mlm loss needs at least one masked position",
        ));
    }
    if logits.nrows() != mask_positions.len() {
        return Err(ClearError::invalid(format!(
            "{} logit rows for {} masked positions",
            logits.nrows(),
            mask_positions.len()
        )));
    }
    for &p in mask_positions {
        match target_ids.get(p) {
            Some(&t) if t < logits.ncols() => {}
            _ => {
                return Err(ClearError::invalid(format!(
                    "bad target at masked position {p}"
                )))
            }
        }
    }
    Ok(())
}

/// Mean over masked positions of the negative log-probability of the true token.
/// `logits` has one row per entry of `mask_positions`.
pub fn mlm_loss(
    logits: ArrayView2<f64>,
    target_ids: &[usize],
    mask_positions: &[usize],
) -> Result<f64> {
    check_mlm_shapes(&logits, target_ids, mask_positions)?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(mask_positions)
        .map(|(row, &p)| -log_softmax_row(&row.to_vec())[target_ids[p]])
        .sum();
    Ok(total / mask_positions.len() as f64)
}

/// Gradient of [`mlm_loss`] with respect to the logits.
pub fn mlm_loss_grad(
    logits: ArrayView2<f64>,
    target_ids: &[usize],
    mask_positions: &[usize],
) -> Result<Array2<f64>> {
    check_mlm_shapes(&logits, target_ids, mask_positions)?;
    let scale = 1.0 / mask_positions.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (r, (row, &p)) in logits.rows().into_iter().zip(mask_positions).enumerate() {
        let lsm = log_softmax_row(&row.to_vec());
        for (c, l) in lsm.into_iter().enumerate() {
            grad[[r, c]] = scale * (l.exp() - f64::from(u8::from(c == target_ids[p])));
        }
    }
    Ok(grad)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `label * d^2 + (1 - label) * max(0, margin - d)^2` with `d` the Euclidean distance.
pub fn contrastive_loss(va: &[f64], vb: &[f64], label: u8, margin: f64) -> f64 {
    debug_assert_eq!(va.len(), vb.len());
    let d = euclidean_distance(va, vb);
    if label == 1 {
        d * d
    } else {
        let h = (margin - d).max(0.0);
        h * h
    }
}

/// Gradients of [`contrastive_loss`] with respect to `va` and `vb`.
/// At `d = 0` with label 0 the (undefined) direction is taken as zero.
pub fn contrastive_loss_grad(
    va: &[f64],
    vb: &[f64],
    label: u8,
    margin: f64,
) -> (Vec<f64>, Vec<f64>) {
    let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
    let coef = if label == 1 {
        2.0
    } else {
        let d = euclidean_distance(va, vb);
        if d >= margin || d == 0.0 {
            0.0
        } else {
            -2.0 * (margin - d) / d
        }
    };
    let ga: Vec<f64> = diff.iter().map(|x| coef * x).collect();
    let gb = ga.iter().map(|x| -x).collect();
    (ga, gb)
}

pub fn total_cl_loss(loss_cl: f64, loss_mlm: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_cl * loss_cl + cfg.lambda_mlm * loss_mlm
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy for one prediction. `p` must lie strictly inside (0, 1).
pub fn classification_loss(p: f64, y: u8) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ClearError::invalid(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    let y = f64::from(y);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Derivative of [`classification_loss`] with respect to `p`.
pub fn classification_loss_grad(p: f64, y: u8) -> f64 {
    let y = f64::from(y);
    -(y / p) + (1.0 - y) / (1.0 - p)
}

/// Mean binary cross-entropy over a batch.
pub fn classification_loss_mean(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(ClearError::invalid(
            "probabilities and labels must be non-empty and equal length",
        ));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        total += classification_loss(p, y)?;
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Scalar-loop cross-entropy, written independently of the implementation.
    fn ce_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
        let mut sum = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let mut z = 0.0;
            for &x in row {
                z += x.exp();
            }
            sum += -(row[t].exp() / z).ln();
        }
        sum / logits.len() as f64
    }

    #[test]
    fn mlm_perfect_and_uniform() {
        let mut logits = Array2::from_elem((2, 5), -1e3);
        logits[[0, 3]] = 1e3;
        logits[[1, 4]] = 1e3;
        let ids = [0, 3, 4];
        assert!(mlm_loss(logits.view(), &ids, &[1, 2]).unwrap() < 1e-12);

        let uniform = Array2::from_elem((2, 7), 0.25);
        let loss = mlm_loss(uniform.view(), &[1, 2, 3], &[0, 2]).unwrap();
        assert!(rel(loss, 7f64.ln()) < 1e-12);
    }

    #[test]
    fn mlm_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let rows = rng.gen_range(1..6);
            let v = rng.gen_range(2..20);
            let n = rows + rng.gen_range(0..5);
            let raw: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let positions: Vec<usize> = (0..rows).collect();
            let logits = Array2::from_shape_fn((rows, v), |(i, j)| raw[i][j]);
            let got = mlm_loss(logits.view(), &targets, &positions).unwrap();
            let want = ce_oracle(&raw, &targets[..rows]);
            assert!(rel(got, want) < 1e-6);
        }
    }

    #[test]
    fn mlm_errors() {
        let logits = Array2::<f64>::zeros((0, 4));
        assert!(mlm_loss(logits.view(), &[1], &[]).is_err());
        let logits = Array2::<f64>::zeros((1, 4));
        assert!(mlm_loss(logits.view(), &[9], &[0]).is_err());
    }

    #[test]
    fn contrastive_worked_values() {
        assert!(contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], 0, 6.0) - 1.0 < 1e-12);
        assert_eq!(contrastive_loss(&[1.0, 2.0], &[1.0, 2.0], 1, 1.0), 0.0);
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], 0, 5.0), 0.0);
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], 0, 2.0), 0.0);
        assert!((contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], 1, 2.0) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn total_weights() {
        let cfg = LossConfig::default();
        assert!((total_cl_loss(2.0, 3.0, &cfg) - 2.3).abs() < 1e-12);
        let no_mlm = LossConfig {
            lambda_mlm: 0.0,
            ..cfg
        };
        assert_eq!(total_cl_loss(2.0, 3.0, &no_mlm), 2.0);
        let none = LossConfig {
            lambda_cl: 0.0,
            lambda_mlm: 0.0,
            ..cfg
        };
        assert_eq!(total_cl_loss(2.0, 3.0, &none), 0.0);
        assert!(LossConfig { margin: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn classification_values() {
        assert!((classification_loss(0.5, 1).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((classification_loss(0.5, 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((classification_loss(0.9, 0).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(classification_loss(1.0 - 1e-12, 1).unwrap() < 1e-11);
        assert!(classification_loss(0.0, 1).is_err());
        assert!(classification_loss(1.0, 0).is_err());
        assert!(classification_loss(clamp_probability(1.0), 0).is_ok());
    }

    #[test]
    fn classification_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<f64> = (0..100).map(|_| rng.gen_range(0.001..0.999)).collect();
        let labels: Vec<u8> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let mut want = 0.0;
        for i in 0..100 {
            want += if labels[i] == 1 {
                -probs[i].ln()
            } else {
                -(1.0 - probs[i]).ln()
            };
        }
        want /= 100.0;
        assert!(rel(classification_loss_mean(&probs, &labels).unwrap(), want) < 1e-6);
    }

    fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..40 {
            let k = 4;
            let va: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vb: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let label = (trial % 2) as u8;
            let margin = 2.5;
            let (ga, gb) = contrastive_loss_grad(&va, &vb, label, margin);
            let na = central(|x| contrastive_loss(x, &vb, label, margin), &va);
            let nb = central(|x| contrastive_loss(&va, x, label, margin), &vb);
            assert!(rel_vec(&ga, &na) < 1e-4, "{ga:?} {na:?}");
            assert!(rel_vec(&gb, &nb) < 1e-4);

            let p = rng.gen_range(0.05..0.95);
            let y = (trial % 2) as u8;
            let num = central(|x| classification_loss(x[0], y).unwrap(), &[p]);
            assert!(rel(classification_loss_grad(p, y), num[0]) < 1e-4);

            let v = 6;
            let flat: Vec<f64> = (0..2 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let targets = [1, 4, 5];
            let positions = [0, 2];
            let f = |x: &[f64]| {
                let l = Array2::from_shape_vec((2, v), x.to_vec()).unwrap();
                mlm_loss(l.view(), &targets, &positions).unwrap()
            };
            let l = Array2::from_shape_vec((2, v), flat.clone()).unwrap();
            let g = mlm_loss_grad(l.view(), &targets, &positions).unwrap();
            assert!(rel_vec(g.as_slice().unwrap(), &central(f, &flat)) < 1e-4);

            let cfg = LossConfig::default();
            let tot = central(|x| total_cl_loss(x[0], x[1], &cfg), &[1.3, 0.7]);
            assert!(rel_vec(&tot, &[cfg.lambda_cl, cfg.lambda_mlm]) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn contrastive_properties(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            margin in 0.1f64..4.0,
            label in 0u8..2,
        ) {
            let l = contrastive_loss(&a, &b, label, margin);
            prop_assert!(l >= 0.0 && l.is_finite());
            prop_assert!((l - contrastive_loss(&b, &a, label, margin)).abs() < 1e-12);
            if label == 0 && euclidean_distance(&a, &b) >= margin {
                prop_assert_eq!(l, 0.0);
            }
        }

        #[test]
        fn contrastive_monotone_in_distance(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0, margin in 0.1f64..4.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let at = |d: f64, label| contrastive_loss(&[0.0, 0.0], &[d, 0.0], label, margin);
            if hi > lo {
                prop_assert!(at(hi, 1) > at(lo, 1));
            }
            prop_assert!(at(hi, 0) <= at(lo, 0));
        }
    }

    #[test]
    fn contrastive_continuous_at_margin() {
        let m = 2.0;
        let at = |d: f64| contrastive_loss(&[0.0], &[d], 0, m);
        assert!(at(m - 1e-9) < 1e-15);
        assert_eq!(at(m), 0.0);
        assert_eq!(at(m + 1e-9), 0.0);
    }
}
