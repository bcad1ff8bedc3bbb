//! Multi-modal multi-horizon estimation model.
//!
//! The `proposed` variant has five parts: an interaction encoder (sum-to-one
//! normalized interaction vector times an embedding matrix), a temporal
//! encoder (stack of causal residual conv blocks plus average pooling), a
//! scale decoder emitting magnitude `sigma` and offset `mu`, a shape decoder
//! mixing a learned shape bank through a softmax, and the amalgamate step
//! `shape * sigma + mu`. Two ablation variants are provided: `base` (temporal
//! encoder plus a linear head) and `base_inter` (temporal passage multiplied by
//! an interaction-derived matrix).
//!
//! Gradients are hand-derived per component; `loss_and_grad` accumulates into
//! a `ModelParams` used as a gradient buffer.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{is_degenerate_std, mean_std, znormalize, Dataset, ModelInput, TrainingExample};
use crate::error::{Error, Result};
use crate::nn::{
    axpy, conv1d_causal, conv1d_causal_backward, conv_kernel_shape, dense, dense_backward, dot,
    global_avg_pool_time, global_avg_pool_time_backward, relu_backward, relu_inplace, softmax,
    softmax_backward, adam_step, AdamHyper, AdamState, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    BaseInter,
    Proposed,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseInter => "base_inter",
            Variant::Proposed => "proposed",
        }
    }

    pub fn uses_interactions(self) -> bool {
        !matches!(self, Variant::Base)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "base_inter" => Ok(Variant::BaseInter),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected base, base_inter or proposed)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weight of the shape term in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Gamma {
    /// Mean per-window population variance of the training targets.
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Auto => s.serialize_str("auto"),
            Gamma::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 0.0 && v.is_finite() => Ok(Gamma::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("gamma must be >= 0, got {v}"))),
            Raw::Str(s) if s == "auto" => Ok(Gamma::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("gamma must be a number or \"auto\", got {s}"))),
        }
    }
}

/// Architecture hyper-parameters plus the data dimensions they bind to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding and hidden width.
    pub n_k: usize,
    /// Kernels per conv layer.
    pub channels: usize,
    pub kernel_width: usize,
    pub n_blocks: usize,
    pub n_basis: usize,
    /// `t_a + t_b`.
    pub horizon: usize,
    pub d: usize,
    pub k: usize,
    pub t_p: usize,
    pub gamma: Gamma,
}

impl ModelConfig {
    pub fn new(variant: Variant, d: usize, k: usize, t_p: usize, horizon: usize) -> Self {
        Self {
            variant,
            n_k: 64,
            channels: 64,
            kernel_width: 3,
            n_blocks: 3,
            n_basis: 16,
            horizon,
            d,
            k,
            t_p,
            gamma: Gamma::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_k", self.n_k),
            ("channels", self.channels),
            ("kernel_width", self.kernel_width),
            ("n_blocks", self.n_blocks),
            ("n_basis", self.n_basis),
            ("horizon", self.horizon),
            ("d", self.d),
            ("t_p", self.t_p),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be >= 1")));
            }
        }
        if self.variant.uses_interactions() && self.k == 0 {
            return Err(Error::Config("interaction dimension k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[n_in, n_out], 1.0 / (n_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[n_out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Tensor::zeros_like(&self.w),
            b: Tensor::zeros_like(&self.b),
        }
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense(x, &self.w, &self.b)
    }

    fn backward(&self, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>, g: &mut Linear) {
        dense_backward(x, &self.w, dy, dx, &mut g.w, &mut g.b);
    }

    fn push<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.w);
        out.push(&self.b);
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[width, c_in, c_out]`
    pub k: Tensor,
    pub b: Tensor,
}

impl Conv {
    fn init<R: Rng + ?Sized>(width: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = (width * c_in) as f64;
        Self {
            k: Tensor::uniform(&conv_kernel_shape(width, c_in, c_out), 1.0 / fan_in.sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            k: Tensor::zeros_like(&self.k),
            b: Tensor::zeros_like(&self.b),
        }
    }
}

/// Residual block: `relu(relu(conv(relu(conv(x)))) + residual(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    /// Width-1 conv matching channel counts; only on the first block.
    pub residual: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Heads {
    Base {
        out: Linear,
    },
    BaseInter {
        top1: Linear,
        top2: Linear,
        bot1: Linear,
        bot2: Linear,
    },
    Proposed {
        scale_top1: Linear,
        scale_top2: Linear,
        scale_bot1: Linear,
        scale_bot2: Linear,
        shape_top1: Linear,
        shape_top2: Linear,
        shape_bot1: Linear,
        shape_bot2: Linear,
    },
}

/// All learnable parameters of one variant. Also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Interaction embedding `C`, `k × n_k`. Absent for `base`.
    pub embedding: Option<Tensor>,
    pub blocks: Vec<ResBlock>,
    pub heads: Heads,
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (n_k, c, w, h) = (cfg.n_k, cfg.channels, cfg.kernel_width, cfg.horizon);
        let embedding = cfg
            .variant
            .uses_interactions()
            .then(|| Tensor::uniform(&[cfg.k, n_k], 1.0 / (cfg.k as f64).sqrt(), rng));
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                let c_in = if i == 0 { cfg.d } else { c };
                ResBlock {
                    conv1: Conv::init(w, c_in, c, rng),
                    conv2: Conv::init(w, c, c, rng),
                    residual: (i == 0).then(|| Conv::init(1, c_in, c, rng)),
                }
            })
            .collect();
        let heads = match cfg.variant {
            Variant::Base => Heads::Base {
                out: Linear::init(c, h, rng),
            },
            Variant::BaseInter => Heads::BaseInter {
                top1: Linear::init(c, n_k, rng),
                top2: Linear::init(n_k, n_k, rng),
                bot1: Linear::init(n_k, n_k, rng),
                bot2: Linear::init(n_k, n_k * h, rng),
            },
            Variant::Proposed => Heads::Proposed {
                scale_top1: Linear::init(c, n_k, rng),
                scale_top2: Linear::init(n_k, n_k, rng),
                scale_bot1: Linear::init(n_k, n_k, rng),
                scale_bot2: Linear::init(n_k, n_k * 2, rng),
                shape_top1: Linear::init(c, n_k, rng),
                shape_top2: Linear::init(n_k, cfg.n_basis, rng),
                shape_bot1: Linear::init(n_k, n_k, rng),
                shape_bot2: Linear::init(n_k, cfg.n_basis * h, rng),
            },
        };
        Ok(Self {
            embedding,
            blocks,
            heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: self.embedding.as_ref().map(Tensor::zeros_like),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                    residual: b.residual.as_ref().map(Conv::zeros_like),
                })
                .collect(),
            heads: match &self.heads {
                Heads::Base { out } => Heads::Base { out: out.zeros_like() },
                Heads::BaseInter { top1, top2, bot1, bot2 } => Heads::BaseInter {
                    top1: top1.zeros_like(),
                    top2: top2.zeros_like(),
                    bot1: bot1.zeros_like(),
                    bot2: bot2.zeros_like(),
                },
                Heads::Proposed {
                    scale_top1,
                    scale_top2,
                    scale_bot1,
                    scale_bot2,
                    shape_top1,
                    shape_top2,
                    shape_bot1,
                    shape_bot2,
                } => Heads::Proposed {
                    scale_top1: scale_top1.zeros_like(),
                    scale_top2: scale_top2.zeros_like(),
                    scale_bot1: scale_bot1.zeros_like(),
                    scale_bot2: scale_bot2.zeros_like(),
                    shape_top1: shape_top1.zeros_like(),
                    shape_top2: shape_top2.zeros_like(),
                    shape_bot1: shape_bot1.zeros_like(),
                    shape_bot2: shape_bot2.zeros_like(),
                },
            },
        }
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(e);
        }
        for b in &self.blocks {
            out.extend([&b.conv1.k, &b.conv1.b, &b.conv2.k, &b.conv2.b]);
            if let Some(r) = &b.residual {
                out.extend([&r.k, &r.b]);
            }
        }
        match &self.heads {
            Heads::Base { out: o } => o.push(&mut out),
            Heads::BaseInter { top1, top2, bot1, bot2 } => {
                for l in [top1, top2, bot1, bot2] {
                    l.push(&mut out);
                }
            }
            Heads::Proposed {
                scale_top1,
                scale_top2,
                scale_bot1,
                scale_bot2,
                shape_top1,
                shape_top2,
                shape_bot1,
                shape_bot2,
            } => {
                for l in [
                    scale_top1, scale_top2, scale_bot1, scale_bot2, shape_top1, shape_top2, shape_bot1,
                    shape_bot2,
                ] {
                    l.push(&mut out);
                }
            }
        }
        out
    }

    /// Every tensor in declaration order, mutably.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        for b in &mut self.blocks {
            out.push(&mut b.conv1.k);
            out.push(&mut b.conv1.b);
            out.push(&mut b.conv2.k);
            out.push(&mut b.conv2.b);
            if let Some(r) = &mut b.residual {
                out.push(&mut r.k);
                out.push(&mut r.b);
            }
        }
        match &mut self.heads {
            Heads::Base { out: o } => o.push_mut(&mut out),
            Heads::BaseInter { top1, top2, bot1, bot2 } => {
                for l in [top1, top2, bot1, bot2] {
                    l.push_mut(&mut out);
                }
            }
            Heads::Proposed {
                scale_top1,
                scale_top2,
                scale_bot1,
                scale_bot2,
                shape_top1,
                shape_top2,
                shape_bot1,
                shape_bot2,
            } => {
                for l in [
                    scale_top1, scale_top2, scale_bot1, scale_bot2, shape_top1, shape_top2, shape_bot1,
                    shape_bot2,
                ] {
                    l.push_mut(&mut out);
                }
            }
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flattened copy of every parameter value.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites every parameter value from a flat vector.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenReps {
    pub h_i: Option<Vec<f64>>,
    pub h_t: Vec<f64>,
}

/// Shape/scale decomposition of a `proposed` prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScale {
    pub shape: Vec<f64>,
    pub sigma: f64,
    pub mu: f64,
    pub mix_weights: Vec<f64>,
    /// Row-major `n_basis × horizon`.
    pub bank: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub m_hat: Vec<f64>,
    /// Present for the `proposed` variant only.
    pub decomposition: Option<ShapeScale>,
}

/// `h_I = (I / sum(I)) C`.
pub fn interaction_encode(interaction: &[f64], embedding: &Tensor) -> Result<Vec<f64>> {
    let normalized = normalize_interaction(interaction)?;
    let n_k = embedding_dims(embedding, interaction.len())?;
    let mut h = vec![0.0; n_k];
    for (i, &w) in normalized.iter().enumerate() {
        if w != 0.0 {
            axpy(&mut h, w, &embedding.data()[i * n_k..(i + 1) * n_k]);
        }
    }
    Ok(h)
}

fn embedding_dims(embedding: &Tensor, k: usize) -> Result<usize> {
    let s = embedding.shape();
    if s.len() != 2 || s[0] != k {
        return Err(Error::Shape(format!("embedding {s:?} does not match interaction length {k}")));
    }
    Ok(s[1])
}

fn normalize_interaction(interaction: &[f64]) -> Result<Vec<f64>> {
    if interaction.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Range("interaction entries must be non-negative".into()));
    }
    let total: f64 = interaction.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("interaction vector is all zeros".into()));
    }
    Ok(interaction.iter().map(|v| v / total).collect())
}

struct BlockCache {
    input: Tensor,
    r1: Tensor,
    r2: Tensor,
    out: Tensor,
}

struct TemporalCache {
    blocks: Vec<BlockCache>,
}

fn temporal_forward(blocks: &[ResBlock], cfg: &ModelConfig, input_ts: &[f64]) -> Result<(Vec<f64>, TemporalCache)> {
    if input_ts.len() != cfg.t_p * cfg.d {
        return Err(Error::Shape(format!(
            "input window has {} values, expected t_p {} x d {}",
            input_ts.len(),
            cfg.t_p,
            cfg.d
        )));
    }
    if let Some(pos) = input_ts.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input window value {pos}")));
    }
    let mut x = Tensor::new(vec![cfg.t_p, cfg.d], input_ts.to_vec())?;
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let mut r1 = conv1d_causal(&x, &block.conv1.k, &block.conv1.b)?;
        relu_inplace(r1.data_mut());
        let mut r2 = conv1d_causal(&r1, &block.conv2.k, &block.conv2.b)?;
        relu_inplace(r2.data_mut());
        let mut out = match &block.residual {
            Some(res) => conv1d_causal(&x, &res.k, &res.b)?,
            None => x.clone(),
        };
        if out.shape() != r2.shape() {
            return Err(Error::Shape(format!(
                "residual passage {:?} does not match main passage {:?}",
                out.shape(),
                r2.shape()
            )));
        }
        axpy(out.data_mut(), 1.0, r2.data());
        relu_inplace(out.data_mut());
        let next = out.clone();
        caches.push(BlockCache { input: x, r1, r2, out });
        x = next;
    }
    let h_t = global_avg_pool_time(&x)?;
    Ok((h_t, TemporalCache { blocks: caches }))
}

fn temporal_backward(blocks: &[ResBlock], cache: &TemporalCache, dh_t: &[f64], grads: &mut [ResBlock]) {
    let time = cache.blocks[0].input.shape()[0];
    let mut d_out = global_avg_pool_time_backward(time, dh_t);
    for (idx, ((block, bc), g)) in blocks.iter().zip(&cache.blocks).zip(grads.iter_mut()).enumerate().rev() {
        relu_backward(bc.out.data(), d_out.data_mut());
        let d_sum = d_out;
        let mut d_r2 = d_sum.clone();
        relu_backward(bc.r2.data(), d_r2.data_mut());
        let mut d_r1 = Tensor::zeros_like(&bc.r1);
        conv1d_causal_backward(&bc.r1, &block.conv2.k, &d_r2, Some(&mut d_r1), &mut g.conv2.k, &mut g.conv2.b);
        relu_backward(bc.r1.data(), d_r1.data_mut());
        let need_dx = idx > 0;
        let mut d_in = Tensor::zeros_like(&bc.input);
        conv1d_causal_backward(
            &bc.input,
            &block.conv1.k,
            &d_r1,
            need_dx.then_some(&mut d_in),
            &mut g.conv1.k,
            &mut g.conv1.b,
        );
        match (&block.residual, g.residual.as_mut()) {
            (Some(res), Some(gres)) => conv1d_causal_backward(
                &bc.input,
                &res.k,
                &d_sum,
                need_dx.then_some(&mut d_in),
                &mut gres.k,
                &mut gres.b,
            ),
            _ => {
                if need_dx {
                    axpy(d_in.data_mut(), 1.0, d_sum.data());
                }
            }
        }
        d_out = d_in;
    }
}

/// Temporal encoder output `h_T` (length `channels`).
pub fn temporal_encode(input_ts: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    temporal_forward(&params.blocks, cfg, input_ts).map(|(h, _)| h)
}

/// Two-layer passage `relu(relu(x A + a) B + b)` with cached activations.
struct Mlp2 {
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn mlp2_relu(l1: &Linear, l2: &Linear, x: &[f64]) -> Result<Mlp2> {
    let mut hidden = l1.forward(x)?;
    relu_inplace(&mut hidden);
    let mut out = l2.forward(&hidden)?;
    relu_inplace(&mut out);
    Ok(Mlp2 { hidden, out })
}

/// `relu(x A + a) B + b` (no final activation).
fn mlp2_linear(l1: &Linear, l2: &Linear, x: &[f64]) -> Result<Mlp2> {
    let mut hidden = l1.forward(x)?;
    relu_inplace(&mut hidden);
    let out = l2.forward(&hidden)?;
    Ok(Mlp2 { hidden, out })
}

/// Backward through a two-layer passage. `d_out` must already be masked by
/// any final activation. Accumulates into `dx`.
fn mlp2_backward(
    l1: &Linear,
    l2: &Linear,
    x: &[f64],
    cache: &Mlp2,
    d_out: &[f64],
    dx: &mut [f64],
    g1: &mut Linear,
    g2: &mut Linear,
) {
    let mut d_hidden = vec![0.0; cache.hidden.len()];
    l2.backward(&cache.hidden, d_out, Some(&mut d_hidden), g2);
    relu_backward(&cache.hidden, &mut d_hidden);
    l1.backward(x, &d_hidden, Some(dx), g1);
}

/// `(sigma, mu) = v W` where `v` is the processed `h_T` and `W` (`n_k × 2`)
/// comes from `h_I`.
pub fn scale_decode(h_i: &[f64], h_t: &[f64], params: &ModelParams) -> Result<(f64, f64)> {
    let Heads::Proposed {
        scale_top1,
        scale_top2,
        scale_bot1,
        scale_bot2,
        ..
    } = &params.heads
    else {
        return Err(Error::Config("scale decoder exists only in the proposed variant".into()));
    };
    let v = mlp2_relu(scale_top1, scale_top2, h_t)?;
    let w = mlp2_linear(scale_bot1, scale_bot2, h_i)?;
    Ok(bilinear2(&v.out, &w.out))
}

fn bilinear2(v: &[f64], wflat: &[f64]) -> (f64, f64) {
    let mut sigma = 0.0;
    let mut mu = 0.0;
    for (r, vr) in v.iter().enumerate() {
        sigma += vr * wflat[2 * r];
        mu += vr * wflat[2 * r + 1];
    }
    (sigma, mu)
}

/// Output of the shape decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeOutput {
    pub shape: Vec<f64>,
    pub mix_weights: Vec<f64>,
    pub bank: Vec<f64>,
}

/// Bank from `h_I`, softmax mixture weights from `h_T`, shape = weights^T bank.
pub fn shape_decode(h_i: &[f64], h_t: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Result<ShapeOutput> {
    let Heads::Proposed {
        shape_top1,
        shape_top2,
        shape_bot1,
        shape_bot2,
        ..
    } = &params.heads
    else {
        return Err(Error::Config("shape decoder exists only in the proposed variant".into()));
    };
    let bank = mlp2_linear(shape_bot1, shape_bot2, h_i)?.out;
    let logits = mlp2_linear(shape_top1, shape_top2, h_t)?.out;
    let mix_weights = softmax(&logits);
    let shape = mix_bank(&mix_weights, &bank, cfg.horizon);
    Ok(ShapeOutput {
        shape,
        mix_weights,
        bank,
    })
}

fn mix_bank(weights: &[f64], bank: &[f64], h: usize) -> Vec<f64> {
    let mut shape = vec![0.0; h];
    for (b, &w) in weights.iter().enumerate() {
        axpy(&mut shape, w, &bank[b * h..(b + 1) * h]);
    }
    shape
}

enum HeadCache {
    Base,
    BaseInter {
        v: Mlp2,
        w: Mlp2,
    },
    Proposed {
        sv: Mlp2,
        sw: Mlp2,
        bank: Mlp2,
        logits: Mlp2,
        mix: Vec<f64>,
        shape: Vec<f64>,
        sigma: f64,
    },
}

struct ForwardCache {
    h_i: Option<Vec<f64>>,
    h_t: Vec<f64>,
    temporal: TemporalCache,
    head: HeadCache,
}

fn forward_cached(params: &ModelParams, cfg: &ModelConfig, input: &ModelInput) -> Result<(Prediction, ForwardCache)> {
    let (h_t, temporal) = temporal_forward(&params.blocks, cfg, &input.input_ts)?;
    let h_i = match &params.embedding {
        Some(c) => Some(interaction_encode(&input.interaction, c)?),
        None => None,
    };
    let h = cfg.horizon;
    let (pred, head) = match &params.heads {
        Heads::Base { out } => (
            Prediction {
                m_hat: out.forward(&h_t)?,
                decomposition: None,
            },
            HeadCache::Base,
        ),
        Heads::BaseInter { top1, top2, bot1, bot2 } => {
            let hi = h_i.as_deref().ok_or_else(|| Error::Config("base_inter needs an embedding".into()))?;
            let v = mlp2_relu(top1, top2, &h_t)?;
            let w = mlp2_linear(bot1, bot2, hi)?;
            let mut m_hat = vec![0.0; h];
            for (r, &vr) in v.out.iter().enumerate() {
                axpy(&mut m_hat, vr, &w.out[r * h..(r + 1) * h]);
            }
            (
                Prediction {
                    m_hat,
                    decomposition: None,
                },
                HeadCache::BaseInter { v, w },
            )
        }
        Heads::Proposed {
            scale_top1,
            scale_top2,
            scale_bot1,
            scale_bot2,
            shape_top1,
            shape_top2,
            shape_bot1,
            shape_bot2,
        } => {
            let hi = h_i.as_deref().ok_or_else(|| Error::Config("proposed needs an embedding".into()))?;
            let sv = mlp2_relu(scale_top1, scale_top2, &h_t)?;
            let sw = mlp2_linear(scale_bot1, scale_bot2, hi)?;
            let (sigma, mu) = bilinear2(&sv.out, &sw.out);
            let bank = mlp2_linear(shape_bot1, shape_bot2, hi)?;
            let logits = mlp2_linear(shape_top1, shape_top2, &h_t)?;
            let mix = softmax(&logits.out);
            let shape = mix_bank(&mix, &bank.out, h);
            let m_hat = shape.iter().map(|s| s * sigma + mu).collect();
            let pred = Prediction {
                m_hat,
                decomposition: Some(ShapeScale {
                    shape: shape.clone(),
                    sigma,
                    mu,
                    mix_weights: mix.clone(),
                    bank: bank.out.clone(),
                }),
            };
            (
                pred,
                HeadCache::Proposed {
                    sv,
                    sw,
                    bank,
                    logits,
                    mix,
                    shape,
                    sigma,
                },
            )
        }
    };
    if let Some(pos) = pred.m_hat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction value {pos}")));
    }
    Ok((
        pred,
        ForwardCache {
            h_i,
            h_t,
            temporal,
            head,
        },
    ))
}

/// Full forward pass for any variant.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, input: &ModelInput) -> Result<Prediction> {
    forward_cached(params, cfg, input).map(|(p, _)| p)
}

/// Encoder outputs only.
pub fn encode(params: &ModelParams, cfg: &ModelConfig, input: &ModelInput) -> Result<HiddenReps> {
    let h_t = temporal_encode(&input.input_ts, params, cfg)?;
    let h_i = match &params.embedding {
        Some(c) => Some(interaction_encode(&input.interaction, c)?),
        None => None,
    };
    Ok(HiddenReps { h_i, h_t })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `MSE(m_hat, target) + gamma * MSE(shape, znorm(target))`. The shape term
/// is dropped for variants without a decomposition and for zero-variance
/// targets.
pub fn loss(pred: &Prediction, target: &[f64], gamma: f64) -> f64 {
    let mut l = mse(&pred.m_hat, target);
    if let Some(dec) = &pred.decomposition {
        let z = znormalize(target);
        if !z.degenerate {
            l += gamma * mse(&dec.shape, &z.values);
        }
    }
    l
}

/// Per-example loss; accumulates `d loss / d params` into `grads`.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    example: &TrainingExample,
    gamma: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let h = cfg.horizon;
    if example.target.len() != h {
        return Err(Error::Shape(format!("target has {} values, horizon is {h}", example.target.len())));
    }
    let (pred, cache) = forward_cached(params, cfg, &example.input)?;
    let value = loss(&pred, &example.target, gamma);
    let inv_h = 1.0 / h as f64;
    let dm: Vec<f64> = pred
        .m_hat
        .iter()
        .zip(&example.target)
        .map(|(p, t)| 2.0 * (p - t) * inv_h)
        .collect();
    let mut dh_t = vec![0.0; cache.h_t.len()];
    let mut dh_i = cache.h_i.as_ref().map(|v| vec![0.0; v.len()]);

    match (&params.heads, &mut grads.heads, &cache.head) {
        (Heads::Base { out }, Heads::Base { out: g }, HeadCache::Base) => {
            out.backward(&cache.h_t, &dm, Some(&mut dh_t), g);
        }
        (
            Heads::BaseInter { top1, top2, bot1, bot2 },
            Heads::BaseInter {
                top1: g1,
                top2: g2,
                bot1: g3,
                bot2: g4,
            },
            HeadCache::BaseInter { v, w },
        ) => {
            let n_k = v.out.len();
            let mut dv = vec![0.0; n_k];
            let mut dw = vec![0.0; n_k * h];
            for r in 0..n_k {
                dv[r] = dot(&w.out[r * h..(r + 1) * h], &dm);
                axpy(&mut dw[r * h..(r + 1) * h], v.out[r], &dm);
            }
            relu_backward(&v.out, &mut dv);
            mlp2_backward(top1, top2, &cache.h_t, v, &dv, &mut dh_t, g1, g2);
            let hi = cache.h_i.as_deref().expect("h_i present");
            mlp2_backward(bot1, bot2, hi, w, &dw, dh_i.as_deref_mut().expect("h_i present"), g3, g4);
        }
        (
            Heads::Proposed {
                scale_top1,
                scale_top2,
                scale_bot1,
                scale_bot2,
                shape_top1,
                shape_top2,
                shape_bot1,
                shape_bot2,
            },
            Heads::Proposed {
                scale_top1: gst1,
                scale_top2: gst2,
                scale_bot1: gsb1,
                scale_bot2: gsb2,
                shape_top1: ght1,
                shape_top2: ght2,
                shape_bot1: ghb1,
                shape_bot2: ghb2,
            },
            HeadCache::Proposed {
                sv,
                sw,
                bank,
                logits,
                mix,
                shape,
                sigma,
            },
        ) => {
            // amalgamate: m = shape * sigma + mu
            let mut dshape: Vec<f64> = dm.iter().map(|g| g * sigma).collect();
            let dsigma = dot(&dm, shape);
            let dmu: f64 = dm.iter().sum();
            let z = znormalize(&example.target);
            if !z.degenerate {
                for ((g, s), zt) in dshape.iter_mut().zip(shape).zip(&z.values) {
                    *g += 2.0 * gamma * (s - zt) * inv_h;
                }
            }
            let hi = cache.h_i.as_deref().expect("h_i present");
            let dhi = dh_i.as_deref_mut().expect("h_i present");

            // scale decoder
            let n_k = sv.out.len();
            let mut dv = vec![0.0; n_k];
            let mut dw = vec![0.0; 2 * n_k];
            for r in 0..n_k {
                dv[r] = dsigma * sw.out[2 * r] + dmu * sw.out[2 * r + 1];
                dw[2 * r] = dsigma * sv.out[r];
                dw[2 * r + 1] = dmu * sv.out[r];
            }
            relu_backward(&sv.out, &mut dv);
            mlp2_backward(scale_top1, scale_top2, &cache.h_t, sv, &dv, &mut dh_t, gst1, gst2);
            mlp2_backward(scale_bot1, scale_bot2, hi, sw, &dw, dhi, gsb1, gsb2);

            // shape decoder
            let n_basis = mix.len();
            let mut dmix = vec![0.0; n_basis];
            let mut dbank = vec![0.0; n_basis * h];
            for b in 0..n_basis {
                dmix[b] = dot(&bank.out[b * h..(b + 1) * h], &dshape);
                axpy(&mut dbank[b * h..(b + 1) * h], mix[b], &dshape);
            }
            let dlogits = softmax_backward(mix, &dmix);
            mlp2_backward(shape_top1, shape_top2, &cache.h_t, logits, &dlogits, &mut dh_t, ght1, ght2);
            mlp2_backward(shape_bot1, shape_bot2, hi, bank, &dbank, dhi, ghb1, ghb2);
        }
        _ => return Err(Error::Shape("gradient buffer does not match the model variant".into())),
    }

    if let (Some(dhi), Some(emb), Some(gemb)) = (&dh_i, &params.embedding, grads.embedding.as_mut()) {
        let normalized = normalize_interaction(&example.input.interaction)?;
        let n_k = emb.shape()[1];
        for (i, &w) in normalized.iter().enumerate() {
            if w != 0.0 {
                axpy(&mut gemb.data_mut()[i * n_k..(i + 1) * n_k], w, dhi);
            }
        }
    }
    temporal_backward(&params.blocks, &cache.temporal, &dh_t, &mut grads.blocks);
    Ok(value)
}

/// `gamma = "auto"`: mean per-window population variance of the targets.
pub fn auto_gamma<'a>(targets: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in targets {
        let (_, std) = crate::data::mean_std(t);
        sum += std * std;
        n += 1;
    }
    if n == 0 || sum <= 0.0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Affine standardization of the feature channels and of the metric. The
/// network works in standardized units; predictions are mapped back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Pooled per-channel and metric statistics over hours `[0, end)` of
    /// every entity. Constant columns keep a unit scale.
    pub fn fit(ds: &Dataset, end: usize) -> Self {
        let d = ds.meta.d;
        let unit = |(m, s): (f64, f64)| if is_degenerate_std(m, s) { (m, 1.0) } else { (m, s) };
        let mut columns = vec![Vec::new(); d];
        let mut metric = Vec::new();
        for rec in &ds.entities {
            let end = end.min(rec.hours());
            for row in rec.features[..end * d].chunks_exact(d) {
                for (c, v) in row.iter().enumerate() {
                    columns[c].push(*v);
                }
            }
            metric.extend_from_slice(&rec.metric[..end]);
        }
        let (feature_mean, feature_std) = columns.iter().map(|c| unit(mean_std(c))).unzip();
        let (target_mean, target_std) = unit(mean_std(&metric));
        Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    pub fn input(&self, input: &ModelInput) -> ModelInput {
        let d = self.feature_mean.len();
        let input_ts = input
            .input_ts
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.feature_mean[i % d]) / self.feature_std[i % d])
            .collect();
        ModelInput {
            input_ts,
            interaction: input.interaction.clone(),
        }
    }

    pub fn target(&self, target: &[f64]) -> Vec<f64> {
        target.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn example(&self, ex: &TrainingExample) -> TrainingExample {
        TrainingExample {
            input: self.input(&ex.input),
            target: self.target(&ex.target),
        }
    }

    /// Maps a prediction made in standardized units back to metric units.
    pub fn restore(&self, mut pred: Prediction) -> Prediction {
        for v in &mut pred.m_hat {
            *v = *v * self.target_std + self.target_mean;
        }
        if let Some(dec) = &mut pred.decomposition {
            dec.sigma *= self.target_std;
            dec.mu = dec.mu * self.target_std + self.target_mean;
        }
        pred
    }
}

/// Parameters, optimizer state, the resolved shape-loss weight and the data
/// standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: Vec<AdamState>,
    /// Shape-loss weight in standardized units.
    pub gamma: f64,
    pub standardizer: Standardizer,
}

impl TrainableModel {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        hyper: AdamHyper,
        gamma: f64,
        standardizer: Standardizer,
        rng: &mut R,
    ) -> Result<Self> {
        if standardizer.feature_mean.len() != config.d || standardizer.feature_std.len() != config.d {
            return Err(Error::Shape(format!("standardizer covers {} channels, model has {}", standardizer.feature_mean.len(), config.d)));
        }
        let params = ModelParams::init(&config, rng)?;
        let adam = params.tensors().into_iter().map(|t| AdamState::new(t, hyper)).collect();
        Ok(Self {
            config,
            params,
            adam,
            gamma,
            standardizer,
        })
    }

    /// Prediction in metric units.
    pub fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let raw = forward(&self.params, &self.config, &self.standardizer.input(input))?;
        Ok(self.standardizer.restore(raw))
    }

    /// Training loss of one example, in standardized units.
    pub fn example_loss(&self, ex: &TrainingExample) -> Result<f64> {
        let ex = self.standardizer.example(ex);
        Ok(loss(&forward(&self.params, &self.config, &ex.input)?, &ex.target, self.gamma))
    }

    /// Mean loss and gradient over the batch, then one Adam step per tensor.
    /// Returns the mean pre-update loss.
    pub fn train_batch(&mut self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Range("empty batch".into()));
        }
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            let ex = self.standardizer.example(ex);
            total += loss_and_grad(&self.params, &self.config, &ex, self.gamma, &mut grads)?;
        }
        grads.scale(1.0 / batch.len() as f64);
        let grad_tensors = grads.tensors();
        // validate all before touching any parameter
        if let Some(t) = grad_tensors.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {t}")));
        }
        for ((p, g), st) in self.params.tensors_mut().into_iter().zip(grad_tensors).zip(&mut self.adam) {
            adam_step(p, g, st)?;
        }
        Ok(total / batch.len() as f64)
    }
}
