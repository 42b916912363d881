//! Contract encoder: token embeddings, the masked-language-model augmentation
//! stack, the CLS summary, sinusoidal positions, the feature-learning stack and
//! the projection head that yields the correlation vector `v`.
//!
//! All forward computations are recorded on an autograd [`Tape`]; the same
//! code serves training (with gradients) and inference.

mod attention;
mod recurrent;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{MASK_ID, PAD_ID};
use crate::error::{ClearError, Result};
use crate::rng::{self, Rng};

pub use attention::AttentionLayer;
pub use recurrent::RecurrentEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    Transformer,
    Rnn,
    Lstm,
    Gru,
}

impl EncoderKind {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Rnn => "rnn",
            EncoderKind::Lstm => "lstm",
            EncoderKind::Gru => "gru",
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != EncoderKind::Transformer
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EncoderKind {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderKind::Transformer),
            "rnn" => Ok(EncoderKind::Rnn),
            "lstm" => Ok(EncoderKind::Lstm),
            "gru" => Ok(EncoderKind::Gru),
            _ => Err(ClearError::invalid(format!("unknown encoder kind {s:?}"))),
        }
    }
}

/// Normalization applied between the two projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionNorm {
    Layer,
    L2,
    None,
}

impl ProjectionNorm {
    pub fn tag(self) -> &'static str {
        match self {
            ProjectionNorm::Layer => "layer",
            ProjectionNorm::L2 => "l2",
            ProjectionNorm::None => "none",
        }
    }
}

impl FromStr for ProjectionNorm {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(ProjectionNorm::Layer),
            "l2" => Ok(ProjectionNorm::L2),
            "none" => Ok(ProjectionNorm::None),
            _ => Err(ClearError::invalid(format!(
                "unknown projection norm {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub k: usize,
    pub heads: usize,
    pub layers_mlm: usize,
    pub layers_feat: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub vocab_size: usize,
    pub encoder_kind: EncoderKind,
    pub projection_norm: ProjectionNorm,
    pub batch_norm: bool,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl EncoderConfig {
    /// Desk-scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            k: 32,
            heads: 4,
            layers_mlm: 1,
            layers_feat: 2,
            ff_dim: 64,
            max_len: 256,
            mask_rate: 0.3,
            vocab_size,
            encoder_kind: EncoderKind::Transformer,
            projection_norm: ProjectionNorm::Layer,
            batch_norm: true,
            bn_momentum: 0.1,
        }
    }

    /// Width, depth and masking rate used in the published experiments.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            k: 512,
            heads: 8,
            layers_mlm: 3,
            layers_feat: 3,
            ff_dim: 2048,
            max_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    /// Checks that do not depend on layer counts; a zero-layer stack is a
    /// valid identity for testing.
    fn check_structure(&self) -> Result<()> {
        if self.k == 0 || !self.k.is_multiple_of(2) {
            return Err(ClearError::invalid(format!(
                "k must be even and positive, got {}",
                self.k
            )));
        }
        if self.heads == 0 || !self.k.is_multiple_of(self.heads) {
            return Err(ClearError::invalid(format!(
                "k={} not divisible by heads={}",
                self.k, self.heads
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(ClearError::invalid(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.vocab_size <= MASK_ID {
            return Err(ClearError::invalid(
                "vocabulary smaller than the reserved tokens",
            ));
        }
        if self.max_len == 0 || self.ff_dim == 0 {
            return Err(ClearError::invalid("max_len and ff_dim must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(ClearError::invalid("bn_momentum must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        if self.layers_mlm == 0 || (self.layers_feat == 0 && !self.encoder_kind.is_recurrent()) {
            return Err(ClearError::invalid("layer counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    mlm_layers: Vec<AttentionLayer>,
    feat_layers: Vec<AttentionLayer>,
    recurrent: Option<RecurrentEncoder>,
    mlm_head_w: ParamId,
    mlm_head_b: ParamId,
    proj_w1: ParamId,
    proj_ln_gamma: ParamId,
    proj_ln_beta: ParamId,
    proj_w2: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Running statistics of the projection's batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

/// All learnable parameters plus normalization statistics. A single state
/// encodes both members of a contrastive pair.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: EncoderConfig,
    params: ParamStore,
    layout: Layout,
    pub running: RunningStats,
}

pub(crate) fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Which masked positions to predict, per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub masked_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

/// Number of non-PAD positions at the head of `ids`.
pub fn valid_length(ids: &[usize]) -> usize {
    ids.iter().position(|&id| id == PAD_ID).unwrap_or(ids.len())
}

/// Replace exactly `max(1, round(rate * n))` uniformly chosen positions with MASK.
pub fn apply_mlm_mask_with(ids: &[usize], mask_rate: f64, rng: &mut Rng) -> MaskedBatch {
    let n = valid_length(ids);
    let count = ((mask_rate * n as f64).round() as usize).clamp(1, n.max(1));
    let mut mask_positions = if n == 0 {
        Vec::new()
    } else {
        sample(rng, n, count).into_vec()
    };
    mask_positions.sort_unstable();
    let mut masked_ids = ids.to_vec();
    for &p in &mask_positions {
        masked_ids[p] = MASK_ID;
    }
    MaskedBatch {
        masked_ids,
        target_ids: ids.to_vec(),
        mask_positions,
    }
}

pub fn apply_mlm_mask(ids: &[usize], mask_rate: f64, seed: u64) -> MaskedBatch {
    apply_mlm_mask_with(ids, mask_rate, &mut rng::stream(seed, rng::MASKING, 0))
}

/// Sinusoidal positions: `PE[p, 2l] = sin(p / 10000^(2l/k))`, `PE[p, 2l+1] = cos(...)`.
pub fn positional_encoding(n: usize, k: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, k));
    for pos in 0..n {
        for l in 0..k / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * l as f64 / k as f64);
            pe[[pos, 2 * l]] = angle.sin();
            pe[[pos, 2 * l + 1]] = angle.cos();
        }
    }
    pe
}

/// `(1/sqrt(n)) * sum of the first n rows`.
pub fn cls_on_tape(tape: &mut Tape, x_prime: Var, valid: usize) -> Var {
    let rows = if valid == tape.value(x_prime).nrows() {
        x_prime
    } else {
        tape.slice_rows(x_prime, 0, valid)
    };
    let sum = tape.sum_rows(rows);
    tape.scale(sum, 1.0 / (valid as f64).sqrt())
}

/// CLS summary of a contextual embedding matrix (all rows valid).
pub fn compute_cls(x_prime: &Array2<f64>) -> Array1<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(x_prime.clone());
    let cls = cls_on_tape(&mut tape, x, x_prime.nrows());
    tape.value(cls).row(0).to_owned()
}

/// Tape handles for one encoded contract.
#[derive(Debug, Clone, Copy)]
pub struct ContractVars {
    pub x_prime: Var,
    pub mlm_logits: Option<Var>,
    /// CLS′ for the Transformer, the projected final hidden state for recurrent kinds.
    pub summary: Var,
    /// Token features, one row per input position.
    pub features: Var,
    pub valid: usize,
}

/// Per-contract results of an eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_prime: Array1<f64>,
    pub features: Array2<f64>,
    pub v: Array1<f64>,
    /// Number of non-PAD rows at the top of `features`.
    pub valid: usize,
}

impl ModelState {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.check_structure()?;
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let k = config.k;
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", init_uniform(config.vocab_size, k, k, &mut rng));
        let mlm_layers = (0..config.layers_mlm)
            .map(|i| {
                AttentionLayer::init(&mut params, &format!("mlm.{i}"), k, config.ff_dim, &mut rng)
            })
            .collect();
        let (feat_layers, recurrent) = if config.encoder_kind.is_recurrent() {
            (
                Vec::new(),
                Some(RecurrentEncoder::init(
                    &mut params,
                    config.encoder_kind,
                    k,
                    &mut rng,
                )),
            )
        } else {
            let layers = (0..config.layers_feat)
                .map(|i| {
                    AttentionLayer::init(
                        &mut params,
                        &format!("feat.{i}"),
                        k,
                        config.ff_dim,
                        &mut rng,
                    )
                })
                .collect();
            (layers, None)
        };
        let mlm_head_w = params.add(
            "mlm_head.w",
            init_uniform(k, config.vocab_size, k, &mut rng),
        );
        let mlm_head_b = params.add("mlm_head.b", Array2::zeros((1, config.vocab_size)));
        let proj_w1 = params.add("proj.w1", init_uniform(k, k, k, &mut rng));
        let proj_ln_gamma = params.add("proj.ln.gamma", Array2::ones((1, k)));
        let proj_ln_beta = params.add("proj.ln.beta", Array2::zeros((1, k)));
        let proj_w2 = params.add("proj.w2", init_uniform(k, k, k, &mut rng));
        let cls_w = params.add("cls.w", init_uniform(2 * k, 1, 2 * k, &mut rng));
        let cls_b = params.add("cls.b", Array2::zeros((1, 1)));
        let layout = Layout {
            embedding,
            mlm_layers,
            feat_layers,
            recurrent,
            mlm_head_w,
            mlm_head_b,
            proj_w1,
            proj_ln_gamma,
            proj_ln_beta,
            proj_w2,
            cls_w,
            cls_b,
        };
        Ok(Self {
            running: RunningStats {
                mean: vec![0.0; k],
                var: vec![1.0; k],
                updates: 0,
            },
            config,
            params,
            layout,
        })
    }

    /// Rebuild a state from loaded parameters; names and shapes must match what
    /// `config` would create.
    pub fn from_parts(
        config: EncoderConfig,
        params: ParamStore,
        running: RunningStats,
    ) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(ClearError::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for id in template.params.ids() {
            let name = template.params.name(id);
            let Some(other) = params.lookup(name) else {
                return Err(ClearError::Checkpoint(format!(
                    "missing parameter group {name}"
                )));
            };
            if params.get(other).shape() != template.params.get(id).shape() {
                return Err(ClearError::Checkpoint(format!("shape mismatch for {name}")));
            }
        }
        if running.mean.len() != config.k || running.var.len() != config.k {
            return Err(ClearError::Checkpoint(
                "running statistics have the wrong width".into(),
            ));
        }
        let layout = Self::bind(&config, &params)
            .ok_or_else(|| ClearError::Checkpoint("parameter layout mismatch".into()))?;
        Ok(Self {
            config,
            params,
            layout,
            running,
        })
    }

    fn bind(config: &EncoderConfig, store: &ParamStore) -> Option<Layout> {
        let p = |name: &str| store.lookup(name);
        let mlm_layers = (0..config.layers_mlm)
            .map(|i| AttentionLayer::bind(store, &format!("mlm.{i}")))
            .collect::<Option<Vec<_>>>()?;
        let (feat_layers, recurrent) = if config.encoder_kind.is_recurrent() {
            (
                Vec::new(),
                Some(RecurrentEncoder::bind(store, config.encoder_kind)?),
            )
        } else {
            let layers = (0..config.layers_feat)
                .map(|i| AttentionLayer::bind(store, &format!("feat.{i}")))
                .collect::<Option<Vec<_>>>()?;
            (layers, None)
        };
        Some(Layout {
            embedding: p("embedding")?,
            mlm_layers,
            feat_layers,
            recurrent,
            mlm_head_w: p("mlm_head.w")?,
            mlm_head_b: p("mlm_head.b")?,
            proj_w1: p("proj.w1")?,
            proj_ln_gamma: p("proj.ln.gamma")?,
            proj_ln_beta: p("proj.ln.beta")?,
            proj_w2: p("proj.w2")?,
            cls_w: p("cls.w")?,
            cls_b: p("cls.b")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn classifier_ids(&self) -> [ParamId; 2] {
        [self.layout.cls_w, self.layout.cls_b]
    }

    /// Parameter groups belonging to the encoder stacks (embedding, attention
    /// or recurrent layers), excluding heads.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n == "embedding"
                    || n.starts_with("mlm.")
                    || n.starts_with("feat.")
                    || n.starts_with("rnn.")
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
            && self
                .running
                .mean
                .iter()
                .chain(&self.running.var)
                .all(|x| x.is_finite())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || valid_length(ids) == 0 {
            return Err(ClearError::invalid(
                "sequence must contain at least one non-PAD token",
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ClearError::invalid(format!(
                "token id {bad} out of range for vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Augmentation stack. Returns X′ and, when `mask_positions` is non-empty,
    /// vocabulary logits at those positions.
    pub fn mlm_forward(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        mask_positions: &[usize],
    ) -> Result<(Var, Option<Var>)> {
        self.check_ids(ids)?;
        let valid = valid_length(ids);
        let mut x = tape.gather(self.layout.embedding, ids);
        for layer in &self.layout.mlm_layers {
            x = layer.forward(tape, x, self.config.heads, valid);
        }
        let logits = if mask_positions.is_empty() {
            None
        } else {
            let rows = tape.gather_rows(x, mask_positions);
            let w = tape.param(self.layout.mlm_head_w);
            let b = tape.param(self.layout.mlm_head_b);
            let z = tape.matmul(rows, w);
            Some(tape.add_row(z, b))
        };
        Ok((x, logits))
    }

    /// Feature stack over `CLS ⊕ (X′ + PE)`; returns `(CLS′, F)`.
    pub fn feature_forward(
        &self,
        tape: &mut Tape,
        cls: Var,
        x_prime: Var,
        pe: &Array2<f64>,
        valid: usize,
    ) -> (Var, Var) {
        let n = tape.value(x_prime).nrows();
        let pe = tape.constant(pe.clone());
        let positioned = tape.add(x_prime, pe);
        let mut seq = tape.concat_rows(&[cls, positioned]);
        for layer in &self.layout.feat_layers {
            seq = layer.forward(tape, seq, self.config.heads, valid + 1);
        }
        let cls_prime = tape.slice_rows(seq, 0, 1);
        let features = tape.slice_rows(seq, 1, n);
        (cls_prime, features)
    }

    /// Recurrent replacement of the feature stack; returns `(summary, F)`.
    pub fn recurrent_encode(
        &self,
        tape: &mut Tape,
        x_prime: Var,
        valid: usize,
    ) -> Result<(Var, Var)> {
        let rec = self.layout.recurrent.as_ref().ok_or_else(|| {
            ClearError::invalid(format!(
                "model uses the {} encoder, not a recurrent one",
                self.config.encoder_kind
            ))
        })?;
        let n = tape.value(x_prime).nrows();
        let (summary, mut features) = rec.forward(tape, x_prime, valid);
        if valid < n {
            let pad = tape.constant(Array2::zeros((n - valid, self.config.k)));
            features = tape.concat_rows(&[features, pad]);
        }
        Ok((summary, features))
    }

    /// Full per-contract encoding up to (but excluding) the projection.
    pub fn encode_contract(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        mask_positions: &[usize],
    ) -> Result<ContractVars> {
        let (x_prime, mlm_logits) = self.mlm_forward(tape, ids, mask_positions)?;
        let valid = valid_length(ids);
        let (summary, features) = if self.config.encoder_kind.is_recurrent() {
            self.recurrent_encode(tape, x_prime, valid)?
        } else {
            let cls = cls_on_tape(tape, x_prime, valid);
            let pe = positional_encoding(ids.len(), self.config.k);
            self.feature_forward(tape, cls, x_prime, &pe, valid)
        };
        Ok(ContractVars {
            x_prime,
            mlm_logits,
            summary,
            features,
            valid,
        })
    }

    /// `v = BatchNorm(W2 · Norm(W1 · CLS′))` over a `B × k` batch of summaries.
    pub fn project(&self, tape: &mut Tape, summaries: Var, mode: Mode) -> Result<Var> {
        if mode == Mode::Eval && self.config.batch_norm && self.running.updates == 0 {
            return Err(ClearError::UninitializedStatistics);
        }
        let w1 = tape.param(self.layout.proj_w1);
        let h = tape.matmul(summaries, w1);
        let h = match self.config.projection_norm {
            ProjectionNorm::Layer => {
                let (g, b) = (
                    tape.param(self.layout.proj_ln_gamma),
                    tape.param(self.layout.proj_ln_beta),
                );
                tape.layer_norm(h, g, b)
            }
            ProjectionNorm::L2 => tape.l2_normalize(h),
            ProjectionNorm::None => h,
        };
        let w2 = tape.param(self.layout.proj_w2);
        let h = tape.matmul(h, w2);
        if !self.config.batch_norm {
            return Ok(h);
        }
        // normalization only, no learnable scale or shift
        let k = self.config.k;
        let (g, b) = (
            tape.constant(Array2::ones((1, k))),
            tape.constant(Array2::zeros((1, k))),
        );
        Ok(match mode {
            Mode::Train => tape.batch_norm(h, g, b),
            Mode::Eval => tape.batch_norm_eval(h, g, b, &self.running.mean, &self.running.var),
        })
    }

    /// Mean of the first `valid` feature rows, as a `1 × k` row.
    pub fn avg_pool(&self, tape: &mut Tape, features: Var, valid: usize) -> Result<Var> {
        if valid == 0 {
            return Err(ClearError::invalid("cannot pool an empty feature matrix"));
        }
        let rows = if valid == tape.value(features).nrows() {
            features
        } else {
            tape.slice_rows(features, 0, valid)
        };
        let sum = tape.sum_rows(rows);
        Ok(tape.scale(sum, 1.0 / valid as f64))
    }

    /// `σ(W3 · (AvgPool(F) ⊕ v) + b)` for a batch: `pooled` is `B × k`, `v` is `B × k`.
    pub fn classify_batch(&self, tape: &mut Tape, pooled: Var, v: Var) -> Var {
        let cat = tape.concat_cols(&[pooled, v]);
        let w = tape.param(self.layout.cls_w);
        let b = tape.param(self.layout.cls_b);
        let z = tape.matmul(cat, w);
        let z = tape.add_row(z, b);
        tape.sigmoid(z)
    }

    /// Fold a train-mode batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.config.bn_momentum;
        let unbias = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for j in 0..self.config.k {
            self.running.mean[j] = (1.0 - m) * self.running.mean[j] + m * mean[j];
            self.running.var[j] = (1.0 - m) * self.running.var[j] + m * var[j] * unbias;
        }
        self.running.updates += 1;
    }

    /// Eval-mode encoding of one contract (no masking).
    pub fn encode_eval(&self, ids: &[usize]) -> Result<EncoderOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.encode_contract(&mut tape, ids, &[])?;
        let v = self.project(&mut tape, vars.summary, Mode::Eval)?;
        Ok(EncoderOutput {
            cls_prime: tape.value(vars.summary).row(0).to_owned(),
            features: tape.value(vars.features).clone(),
            v: tape.value(v).row(0).to_owned(),
            valid: vars.valid,
        })
    }
}
