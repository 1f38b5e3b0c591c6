//! Embedding model and metric-learning training on mined tuples.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, Embeddings};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::mining::{sample_epoch_tuples, MiningConfig, TrainingPool};

pub const MODEL_MAGIC: &[u8; 4] = b"MOMM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    /// One ReLU hidden layer.
    Mlp,
}

/// `z = normalize(W x + b)` for the linear kind,
/// `z = normalize(W₂ relu(W₁ x + b₁) + b₂)` for the MLP.
///
/// Parameter layout: layer by layer, weights row-major (`out × in`), then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

pub(crate) struct ForwardTrace {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

fn param_count(kind: ModelKind, d_in: usize, d_out: usize, hidden: usize) -> usize {
    match kind {
        ModelKind::Linear => d_out * d_in + d_out,
        ModelKind::Mlp => hidden * d_in + hidden + d_out * hidden + d_out,
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let cols = x.len();
    out.extend(b.iter().enumerate().map(|(o, &bo)| bo + dot(&w[o * cols..(o + 1) * cols], x)));
}

impl EmbeddingModel {
    pub fn new(
        kind: ModelKind,
        input_dim: usize,
        output_dim: usize,
        hidden_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || (kind == ModelKind::Mlp && hidden_dim == 0) {
            return Err(Error::InvalidParameter("model dims must be positive".into()));
        }
        let hidden_dim = if kind == ModelKind::Linear { 0 } else { hidden_dim };
        let expected = param_count(kind, input_dim, output_dim, hidden_dim);
        if params.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                found: params.len(),
            });
        }
        Ok(Self {
            kind,
            input_dim,
            output_dim,
            hidden_dim,
            params,
        })
    }

    /// Linear model with `W = I`, `b = 0`: the embedding starts out equal to the
    /// (normalized) input features.
    pub fn identity(dim: usize) -> Self {
        let mut params = vec![0.0; dim * dim + dim];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        Self::new(ModelKind::Linear, dim, dim, 0, params).expect("identity dims are valid")
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn random(kind: ModelKind, input_dim: usize, output_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize, out: &mut Vec<f64>| {
            let s = 1.0 / (cols as f64).sqrt();
            out.extend((0..rows * cols).map(|_| s * rng.sample::<f64, _>(StandardNormal)));
            out.extend(std::iter::repeat_n(0.0, rows));
        };
        let mut params = Vec::new();
        match kind {
            ModelKind::Linear => layer(output_dim, input_dim, &mut params),
            ModelKind::Mlp => {
                layer(hidden_dim, input_dim, &mut params);
                layer(output_dim, hidden_dim, &mut params);
            }
        }
        Self::new(kind, input_dim, output_dim, hidden_dim, params)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (d_in, h, d_out) = (self.input_dim, self.hidden_dim, self.output_dim);
        match self.kind {
            ModelKind::Linear => {
                let (w, b) = self.params.split_at(d_out * d_in);
                (w, b, &[], &[])
            }
            ModelKind::Mlp => {
                let (w1, rest) = self.params.split_at(h * d_in);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(d_out * h);
                (w1, b1, w2, b2)
            }
        }
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model input".into()));
        }
        let (w1, b1, w2, b2) = self.split();
        let mut hidden_pre = Vec::new();
        let mut hidden = Vec::new();
        let mut u = Vec::new();
        match self.kind {
            ModelKind::Linear => affine(w1, b1, x, &mut u),
            ModelKind::Mlp => {
                affine(w1, b1, x, &mut hidden_pre);
                hidden.extend(hidden_pre.iter().map(|&v| v.max(0.0)));
                affine(w2, b2, &hidden, &mut u);
            }
        }
        let norm = dot(&u, &u).sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateOutput);
        }
        u.iter_mut().for_each(|v| *v /= norm);
        Ok(ForwardTrace {
            input: x.to_vec(),
            hidden_pre,
            hidden,
            norm,
            output: u,
        })
    }

    /// Unit-norm embedding of `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂z` for one forward pass.
    pub(crate) fn backward(&self, trace: &ForwardTrace, grad_z: &[f64], grads: &mut [f64]) {
        // through z = u / ‖u‖: project onto the tangent space, scale by 1/‖u‖
        let z = &trace.output;
        let zg = dot(z, grad_z);
        let gu: Vec<f64> = z.iter().zip(grad_z).map(|(&zi, &gi)| (gi - zi * zg) / trace.norm).collect();

        let (d_in, h, d_out) = (self.input_dim, self.hidden_dim, self.output_dim);
        match self.kind {
            ModelKind::Linear => {
                let (gw, gb) = grads.split_at_mut(d_out * d_in);
                for o in 0..d_out {
                    for (g, &xi) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(&trace.input) {
                        *g += gu[o] * xi;
                    }
                    gb[o] += gu[o];
                }
            }
            ModelKind::Mlp => {
                let (_, _, w2, _) = self.split();
                let (gw1, rest) = grads.split_at_mut(h * d_in);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(d_out * h);
                let mut gh = vec![0.0; h];
                for o in 0..d_out {
                    for k in 0..h {
                        gw2[o * h + k] += gu[o] * trace.hidden[k];
                        gh[k] += w2[o * h + k] * gu[o];
                    }
                    gb2[o] += gu[o];
                }
                for k in 0..h {
                    if trace.hidden_pre[k] <= 0.0 {
                        continue;
                    }
                    for (g, &xi) in gw1[k * d_in..(k + 1) * d_in].iter_mut().zip(&trace.input) {
                        *g += gh[k] * xi;
                    }
                    gb1[k] += gh[k];
                }
            }
        }
    }

    /// Embed the listed items (or all when `items` is `None`); other rows stay zero.
    pub fn embed(&self, features: &FeatureSet, items: Option<&[usize]>) -> Result<Embeddings> {
        let mut out = Embeddings::zeros(features.len(), self.output_dim);
        let mut x = vec![0.0; features.dim()];
        let mut one = |i: usize, out: &mut Embeddings| -> Result<()> {
            x.iter_mut().zip(features.row(i)).for_each(|(a, &b)| *a = b as f64);
            out.row_mut(i).copy_from_slice(&self.forward(&x)?);
            Ok(())
        };
        match items {
            Some(ids) => ids.iter().try_for_each(|&i| one(i, &mut out))?,
            None => (0..features.len()).try_for_each(|i| one(i, &mut out))?,
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + 4 * self.params.len());
        buf.extend_from_slice(MODEL_MAGIC);
        let kind: u32 = match self.kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
        };
        for v in [kind, self.input_dim as u32, self.output_dim as u32, self.hidden_dim as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::BadMagic { expected: "MOMM" });
        }
        if bytes.len() < 20 {
            return Err(Error::TruncatedFile {
                expected: 20,
                found: bytes.len() as u64,
            });
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let kind = match word(4) {
            0 => ModelKind::Linear,
            1 => ModelKind::Mlp,
            k => return Err(Error::InvalidParameter(format!("unknown model kind {k} at byte offset 4"))),
        };
        let (d_in, d_out, h) = (word(8), word(12), word(16));
        let count = param_count(kind, d_in, d_out, h);
        let expected = 20 + 4 * count as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::TruncatedFile {
                expected,
                found: bytes.len() as u64,
            });
        }
        let params = bytes[20..expected as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(kind, d_in, d_out, h, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.at(path))
    }
}

/// Loss value and its gradients with respect to the three embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl LossGrads {
    fn zero(dim: usize) -> Self {
        Self {
            loss: 0.0,
            anchor: vec![0.0; dim],
            positive: vec![0.0; dim],
            negative: vec![0.0; dim],
        }
    }

    fn scale(mut self, s: f64) -> Self {
        self.loss *= s;
        for g in [&mut self.anchor, &mut self.positive, &mut self.negative] {
            g.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

/// `‖r − p‖² + [m − ‖r − n‖]₊²`
pub fn contrastive_loss(zr: &[f64], zp: &[f64], zn: &[f64], margin: f64) -> LossGrads {
    let mut out = LossGrads::zero(zr.len());
    for i in 0..zr.len() {
        let d = zr[i] - zp[i];
        out.loss += d * d;
        out.anchor[i] += 2.0 * d;
        out.positive[i] -= 2.0 * d;
    }
    let diff: Vec<f64> = zr.iter().zip(zn).map(|(a, b)| a - b).collect();
    let dist = dot(&diff, &diff).sqrt();
    let hinge = margin - dist;
    if hinge > 0.0 {
        out.loss += hinge * hinge;
        // ∂dist/∂r = diff / dist; undefined at dist = 0, where we take 0
        if dist > 0.0 {
            let c = -2.0 * hinge / dist;
            for i in 0..zr.len() {
                out.anchor[i] += c * diff[i];
                out.negative[i] -= c * diff[i];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletForm {
    /// `[m + ‖r − p‖² − ‖r − n‖²]₊`
    Standard,
    /// `[m + ‖r − p‖² − ‖r − n‖]₊²`
    Literal,
}

pub fn triplet_loss(zr: &[f64], zp: &[f64], zn: &[f64], margin: f64) -> LossGrads {
    triplet_loss_with(zr, zp, zn, margin, TripletForm::Standard)
}

pub fn triplet_loss_with(zr: &[f64], zp: &[f64], zn: &[f64], margin: f64, form: TripletForm) -> LossGrads {
    let dim = zr.len();
    let mut out = LossGrads::zero(dim);
    let dp: Vec<f64> = zr.iter().zip(zp).map(|(a, b)| a - b).collect();
    let dn: Vec<f64> = zr.iter().zip(zn).map(|(a, b)| a - b).collect();
    let dp2 = dot(&dp, &dp);
    let dn2 = dot(&dn, &dn);
    match form {
        TripletForm::Standard => {
            let t = margin + dp2 - dn2;
            if t > 0.0 {
                out.loss = t;
                for i in 0..dim {
                    out.anchor[i] = 2.0 * dp[i] - 2.0 * dn[i];
                    out.positive[i] = -2.0 * dp[i];
                    out.negative[i] = 2.0 * dn[i];
                }
            }
        }
        TripletForm::Literal => {
            let dn1 = dn2.sqrt();
            let t = margin + dp2 - dn1;
            if t > 0.0 {
                out.loss = t * t;
                let inv = if dn1 > 0.0 { 1.0 / dn1 } else { 0.0 };
                for i in 0..dim {
                    let gp = 2.0 * dp[i];
                    let gn = dn[i] * inv;
                    out.anchor[i] = 2.0 * t * (gp - gn);
                    out.positive[i] = -2.0 * t * gp;
                    out.negative[i] = 2.0 * t * gn;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Triplet,
}

impl LossKind {
    pub fn default_margin(self) -> f64 {
        match self {
            LossKind::Contrastive => 0.7,
            LossKind::Triplet => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightNormalization {
    /// Divide by the largest manifold similarity in the anchor's positive pool.
    PerAnchorMax,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub triplet_form: TripletForm,
    pub weighted: bool,
    pub weight_normalization: WeightNormalization,
    pub margin: f64,
    pub lr0: f64,
    /// Learning rate multiplier applied every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_loss(LossKind::Triplet)
    }
}

impl TrainConfig {
    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            loss,
            triplet_form: TripletForm::Standard,
            weighted: false,
            weight_normalization: WeightNormalization::PerAnchorMax,
            margin: loss.default_margin(),
            lr0: 1e-2,
            lr_decay: 0.1,
            lr_step: 10,
            momentum: 0.9,
            batch_size: 42,
            epochs: 30,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidParameter("margin must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::InvalidParameter("batch_size and lr_step must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidParameter("learning rate parameters must be > 0".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }

    pub fn loss_grads(&self, zr: &[f64], zp: &[f64], zn: &[f64]) -> LossGrads {
        match self.loss {
            LossKind::Contrastive => contrastive_loss(zr, zp, zn, self.margin),
            LossKind::Triplet => triplet_loss_with(zr, zp, zn, self.margin, self.triplet_form),
        }
    }
}

/// Scale loss and gradients by the positive's manifold similarity
/// (normalized by `anchor_max` in per-anchor-max mode). Pass-through when the
/// config is unweighted.
pub fn apply_weight(lg: LossGrads, weight: f64, anchor_max: f64, config: &TrainConfig) -> LossGrads {
    if !config.weighted {
        return lg;
    }
    let w = match config.weight_normalization {
        WeightNormalization::PerAnchorMax if anchor_max > 0.0 => weight / anchor_max,
        WeightNormalization::PerAnchorMax => 0.0,
        WeightNormalization::None => weight,
    };
    lg.scale(w)
}

/// `v ← μv − ηg; θ ← θ + v`
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// Weighted loss of one (anchor, positive, negative) input triple; adds its
/// parameter gradient into `grads`.
pub fn tuple_loss_grad(
    model: &EmbeddingModel,
    inputs: &[Vec<f64>; 3],
    weight: f64,
    anchor_max: f64,
    config: &TrainConfig,
    grads: &mut [f64],
) -> Result<f64> {
    if grads.len() != model.param_count() {
        return Err(Error::LengthMismatch {
            left: grads.len(),
            right: model.param_count(),
        });
    }
    let tr = model.forward_trace(&inputs[0])?;
    let tp = model.forward_trace(&inputs[1])?;
    let tn = model.forward_trace(&inputs[2])?;
    let lg = config.loss_grads(&tr.output, &tp.output, &tn.output);
    let lg = apply_weight(lg, weight, anchor_max, config);
    model.backward(&tr, &lg.anchor, grads);
    model.backward(&tp, &lg.positive, grads);
    model.backward(&tn, &lg.negative, grads);
    Ok(lg.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub tuples_used: usize,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,lr,tuples_used\n");
    for e in log {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{}", e.epoch, e.mean_loss, e.lr, e.tuples_used);
    }
    s
}

/// Train on the pools. Each epoch re-embeds the pooled items, samples one
/// tuple per anchor (hard negatives judged in the current embedding), shuffles
/// and takes one momentum-SGD step per mini-batch on the batch-mean loss.
pub fn train(
    features: &FeatureSet,
    pool: &TrainingPool,
    model: &EmbeddingModel,
    config: &TrainConfig,
    mining: &MiningConfig,
) -> Result<(EmbeddingModel, Vec<EpochLog>)> {
    config.validate()?;
    if model.input_dim() != features.dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            found: features.dim(),
        });
    }
    let mut model = model.clone();
    let mut velocity = vec![0.0; model.param_count()];
    let mut grads = vec![0.0; model.param_count()];
    let anchor_max: HashMap<usize, f64> = pool
        .pools
        .iter()
        .map(|p| (p.anchor, p.max_positive_weight()))
        .collect();
    let input = |i: usize| -> Vec<f64> { features.row(i).iter().map(|&v| v as f64).collect() };

    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let (sample_seed, shuffle_seed) = (seeds.random::<u64>(), seeds.random::<u64>());
        let embeddings = model.embed(features, Some(&pool.items))?;
        let mut tuples = sample_epoch_tuples(&pool.pools, &embeddings, mining, sample_seed)?.tuples;
        tuples.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut total = 0.0;
        for batch in tuples.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for t in batch {
                let xs = [input(t.anchor), input(t.positive), input(t.negative)];
                total += tuple_loss_grad(&model, &xs, t.weight, anchor_max[&t.anchor], config, &mut grads)?;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            sgd_momentum_step(&mut model.params, &grads, &mut velocity, lr, config.momentum);
        }
        let mean_loss = if tuples.is_empty() { 0.0 } else { total / tuples.len() as f64 };
        if !mean_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: mean loss {mean_loss:.6} lr {lr:.1e} tuples {}", tuples.len());
        log.push(EpochLog {
            epoch,
            mean_loss,
            lr,
            tuples_used: tuples.len(),
        });
    }
    Ok((model, log))
}
