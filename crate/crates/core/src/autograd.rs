//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are read
//! from a borrowed [`ParamStore`] without copying; [`Tape::backward`] returns
//! one gradient per parameter that took part in the computation.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::objectives;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        scale: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SumRows(Var),
    MlmLoss {
        logits: Var,
        targets: Vec<usize>,
        positions: Vec<usize>,
    },
    Contrastive {
        v: Var,
        pairs: Vec<(usize, usize, u8)>,
        margin: f64,
    },
    Bce {
        p: Var,
        labels: Vec<u8>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

/// Column statistics computed by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    batch_stats: Vec<BatchStats>,
}

/// Gradients indexed by parameter; `None` for parameters that did not take part.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id)
            .map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Drop the gradients of groups for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            batch_stats: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Statistics of every train-mode batch normalization, in recording order.
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Rows `ids` of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax over the first `valid` columns; the rest get probability 0.
    pub fn masked_softmax(&mut self, a: Var, valid: usize) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
            let head = row.slice(s![..valid]);
            let max = head.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (j, &v) in head.iter().enumerate() {
                let e = (v - max).exp();
                o[j] = e;
                z += e;
            }
            o.slice_mut(s![..valid]).mapv_inplace(|e| e / z);
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    /// Per-row normalization with learned gain and bias (`1 × c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut rstd = Vec::with_capacity(xv.nrows());
        for (mut h, row) in xhat.rows_mut().into_iter().zip(xv.rows()) {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            h.zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Train-mode batch normalization over rows (one statistic per column).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let b = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = centered;
        for (mut col, &r) in xhat.columns_mut().into_iter().zip(&rstd) {
            col.mapv_inplace(|v| v * r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.batch_stats.push(BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count: xv.nrows(),
        });
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for ((mut col, &m), &s) in xhat.columns_mut().into_iter().zip(mean).zip(&scale) {
            col.mapv_inplace(|v| (v - m) * s);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                scale,
            },
        )
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let out = xv.select(Axis(0), rows);
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(x))
    }

    pub fn mlm_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        positions: &[usize],
    ) -> crate::error::Result<Var> {
        let l = objectives::mlm_loss(self.value(logits).view(), targets, positions)?;
        Ok(self.push(
            Array2::from_elem((1, 1), l),
            Op::MlmLoss {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
            },
        ))
    }

    /// Mean contrastive loss over `(row_a, row_b, label)` pairs of `v`.
    pub fn contrastive(&mut self, v: Var, pairs: &[(usize, usize, u8)], margin: f64) -> Var {
        let vv = self.value(v);
        let total: f64 = pairs
            .iter()
            .map(|&(a, b, l)| {
                objectives::contrastive_loss(
                    vv.row(a).as_slice().expect("contiguous"),
                    vv.row(b).as_slice().expect("contiguous"),
                    l,
                    margin,
                )
            })
            .sum();
        let mean = if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        };
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::Contrastive {
                v,
                pairs: pairs.to_vec(),
                margin,
            },
        )
    }

    /// Mean binary cross-entropy of a `B × 1` probability column, clamped away from 0 and 1.
    pub fn bce(&mut self, p: Var, labels: &[u8]) -> crate::error::Result<Var> {
        let probs: Vec<f64> = self
            .value(p)
            .iter()
            .map(|&q| objectives::clamp_probability(q))
            .collect();
        let l = objectives::classification_loss_mean(&probs, labels)?;
        Ok(self.push(
            Array2::from_elem((1, 1), l),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Array2::from_elem(self.value(root).raw_dim(), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut out = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.params.get(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    out.accumulate(*table, &gt);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(|x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                    });
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = self.value(Var(i)).mapv(|t| 1.0 - t * t);
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = self.value(Var(i)).mapv(|p| p * (1.0 - p));
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let p = self.value(Var(i));
                    let mut ga = Array2::zeros(p.raw_dim());
                    for ((mut o, pr), gr) in ga.rows_mut().into_iter().zip(p.rows()).zip(g.rows()) {
                        let dot = pr.dot(&gr);
                        o.zip_mut_with(&pr, |o, &pv| *o = pv);
                        o.zip_mut_with(&gr, |o, &gv| *o *= gv - dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * self.value(*gamma);
                    let c = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (((mut o, dh), h), &r) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(rstd)
                    {
                        let m1 = dh.sum() / c;
                        let m2 = dh.dot(&h) / c;
                        for j in 0..o.len() {
                            o[j] = r * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * self.value(*gamma);
                    let b = xhat.nrows() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (j, &r) in rstd.iter().enumerate() {
                        let dh = dxhat.column(j);
                        let h = xhat.column(j);
                        let m1 = dh.sum() / b;
                        let m2 = dh.dot(&h) / b;
                        for k in 0..xhat.nrows() {
                            gx[[k, j]] = r * (dh[k] - m1 - h[k] * m2);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    scale,
                } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let mut gx = &g * self.value(*gamma);
                    for (mut col, &s) in gx.columns_mut().into_iter().zip(scale) {
                        col.mapv_inplace(|v| v * s);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = self.value(Var(i));
                    let mut gx = Array2::zeros(y.raw_dim());
                    for (((mut o, yr), gr), &n) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(g.rows())
                        .zip(norms)
                    {
                        let dot = yr.dot(&gr);
                        for j in 0..o.len() {
                            o[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let n = self.value(*x).nrows();
                    let gx = g
                        .broadcast((n, g.ncols()))
                        .expect("row broadcast")
                        .to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::MlmLoss {
                    logits,
                    targets,
                    positions,
                } => {
                    let gl =
                        objectives::mlm_loss_grad(self.value(*logits).view(), targets, positions)
                            .expect("validated in forward")
                            * g[[0, 0]];
                    acc(&mut grads, *logits, gl);
                }
                Op::Contrastive { v, pairs, margin } => {
                    let vv = self.value(*v);
                    let mut gv = Array2::zeros(vv.raw_dim());
                    let w = g[[0, 0]] / pairs.len().max(1) as f64;
                    for &(a, b, l) in pairs {
                        let (ga, gb) = objectives::contrastive_loss_grad(
                            vv.row(a).as_slice().expect("contiguous"),
                            vv.row(b).as_slice().expect("contiguous"),
                            l,
                            *margin,
                        );
                        for j in 0..ga.len() {
                            gv[[a, j]] += w * ga[j];
                            gv[[b, j]] += w * gb[j];
                        }
                    }
                    acc(&mut grads, *v, gv);
                }
                Op::Bce { p, labels } => {
                    let pv = self.value(*p);
                    let w = g[[0, 0]] / labels.len() as f64;
                    let mut gp = Array2::zeros(pv.raw_dim());
                    for ((o, &q), &y) in gp.iter_mut().zip(pv.iter()).zip(labels) {
                        let inside = q > objectives::PROB_EPS && q < 1.0 - objectives::PROB_EPS;
                        if inside {
                            *o = w * objectives::classification_loss_grad(q, y);
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
