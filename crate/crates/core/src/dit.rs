//! A small, randomly initialized diffusion transformer.
//!
//! Each block is three residual sublayers (self-attention, optional
//! cross-attention, MLP). The block asks an [`Interceptor`] for every raw
//! sublayer output, so a cache can substitute stored or extrapolated
//! features without the sublayer ever running. Modulation and the residual
//! add are always evaluated locally on whatever raw output comes back.
//!
//! With the default [`AdaLnPlacement::Output`] the block is
//!
//! ```text
//! S = x + AdaLN(s(x))
//! C = S + AdaLN(c(S))
//! M = C + AdaLN(m(C))
//! ```
//!
//! where `AdaLN(y) = scale(cond) ⊙ LN(y) + shift(cond)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::numerics::{
    add, gaussian_fill, gelu, layer_norm_rows, matmul, row_softmax, Rng, Tensor, LAYER_NORM_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    SelfAttn,
    CrossAttn,
    Mlp,
}

impl SublayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SublayerKind::SelfAttn => "self_attn",
            SublayerKind::CrossAttn => "cross_attn",
            SublayerKind::Mlp => "mlp",
        }
    }

    /// Kinds present in a block, in evaluation order.
    pub fn for_block(has_cross_attention: bool) -> Vec<SublayerKind> {
        if has_cross_attention {
            vec![
                SublayerKind::SelfAttn,
                SublayerKind::CrossAttn,
                SublayerKind::Mlp,
            ]
        } else {
            vec![SublayerKind::SelfAttn, SublayerKind::Mlp]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SublayerId {
    pub block: usize,
    pub kind: SublayerKind,
}

impl SublayerId {
    pub fn new(block: usize, kind: SublayerKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for SublayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.as_str())
    }
}

/// Where the adaptive layer norm sits relative to the sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaLnPlacement {
    /// Modulate the sublayer output, then add it to the residual stream.
    #[default]
    Output,
    /// Modulate the sublayer input and gate its output (adaLN-Zero style).
    Input,
}

/// Position of one model evaluation within a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCtx {
    /// 1-based generation-order index (1 is the noisiest step).
    pub index: usize,
    /// Diffusion timestep fed to the timestep embedding.
    pub timestep: usize,
    /// Length of the diffusion schedule the timestep lives in.
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub has_cross_attention: bool,
    pub cond_dim: usize,
    /// Rows of the per-prompt context matrix consumed by cross-attention.
    pub context_tokens: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub adaln_placement: AdaLnPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            tokens: 16,
            channels: 64,
            heads: 4,
            mlp_ratio: 4.0,
            has_cross_attention: true,
            cond_dim: 32,
            context_tokens: 8,
            num_classes: 10,
            seed: 0,
            adaln_placement: AdaLnPlacement::Output,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.tokens == 0 || self.channels == 0 || self.cond_dim == 0 {
            return fail("tokens, channels and cond_dim must be positive".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return fail(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.has_cross_attention && self.context_tokens == 0 {
            return fail("cross-attention needs at least one context token".into());
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn sublayer_kinds(&self) -> Vec<SublayerKind> {
        SublayerKind::for_block(self.has_cross_attention)
    }
}

/// Conditioning for one sample: a class label, an optional context matrix
/// for cross-attention, and the seed of the initial noise latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInfo {
    pub class_id: usize,
    pub context: Option<Tensor>,
    pub seed: u64,
}

impl ConditionInfo {
    /// Class-only conditioning.
    pub fn class(class_id: usize, seed: u64) -> Self {
        Self {
            class_id,
            context: None,
            seed,
        }
    }

    /// Conditioning for `prompt_id`: the class cycles through the model's
    /// labels and, when the model has cross-attention, a random context
    /// matrix is drawn from a stream keyed by the prompt id.
    pub fn for_prompt(config: &ModelConfig, prompt_id: u64, seed: u64) -> Self {
        let class_id = (prompt_id % config.num_classes.max(1) as u64) as usize;
        let context = config.has_cross_attention.then(|| {
            let mut rng = Rng::new(0xc0de_c0de).fork(prompt_id);
            gaussian_fill(&mut rng, config.context_tokens, config.cond_dim, 1.0)
        });
        Self {
            class_id,
            context,
            seed,
        }
    }
}

/// Supplies raw sublayer outputs to a block.
///
/// `compute` evaluates the sublayer on the current input. An implementation
/// either calls it (and may keep the result) or returns a substitute
/// without calling it.
pub trait Interceptor {
    fn sublayer(
        &mut self,
        id: SublayerId,
        step: usize,
        compute: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<Tensor>;
}

/// Always computes.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl Interceptor for PassThrough {
    fn sublayer(
        &mut self,
        _id: SublayerId,
        _step: usize,
        compute: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<Tensor> {
        compute()
    }
}

/// A noise predictor the sampler can drive.
pub trait Denoiser: Sync {
    /// Shape of the latent and of every raw sublayer output.
    fn latent_shape(&self) -> (usize, usize);

    fn depth(&self) -> usize;

    fn sublayer_kinds(&self) -> Vec<SublayerKind>;

    fn sublayer_ids(&self) -> Vec<SublayerId> {
        let kinds = self.sublayer_kinds();
        (0..self.depth())
            .flat_map(|l| kinds.iter().map(move |&k| SublayerId::new(l, k)))
            .collect()
    }

    fn flop_model(&self) -> FlopModel;

    fn predict(
        &self,
        x: &Tensor,
        cond: &ConditionInfo,
        step: StepCtx,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor>;
}

/// Linear maps from the conditioning vector to per-channel shift, scale
/// and gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaLnMap {
    pub shift_w: Tensor,
    pub shift_b: Tensor,
    pub scale_w: Tensor,
    pub scale_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub shift: Tensor,
    pub scale: Tensor,
    pub gate: Tensor,
}

impl AdaLnMap {
    /// Constant modulation: `scale`, `shift` and `gate` independent of the
    /// conditioning.
    pub fn constant(cond_dim: usize, channels: usize, scale: f64, shift: f64, gate: f64) -> Self {
        Self {
            shift_w: Tensor::zeros(cond_dim, channels),
            shift_b: Tensor::filled(1, channels, shift),
            scale_w: Tensor::zeros(cond_dim, channels),
            scale_b: Tensor::filled(1, channels, scale),
            gate_w: Tensor::zeros(cond_dim, channels),
            gate_b: Tensor::filled(1, channels, gate),
        }
    }

    pub fn modulation(&self, cond_embed: &Tensor) -> Result<Modulation> {
        if cond_embed.rows() != 1 || cond_embed.cols() != self.shift_w.rows() {
            return Err(Error::Config(format!(
                "conditioning embedding has shape {:?}, modulation expects 1x{}",
                cond_embed.shape(),
                self.shift_w.rows()
            )));
        }
        Ok(Modulation {
            shift: add(&matmul(cond_embed, &self.shift_w)?, &self.shift_b)?,
            scale: add(&matmul(cond_embed, &self.scale_w)?, &self.scale_b)?,
            gate: add(&matmul(cond_embed, &self.gate_w)?, &self.gate_b)?,
        })
    }

    /// `scale(cond) ⊙ LN(y) + shift(cond)`, broadcast over rows.
    pub fn apply(&self, y: &Tensor, cond_embed: &Tensor) -> Result<Tensor> {
        let m = self.modulation(cond_embed)?;
        adaln(y, &m)
    }
}

/// Adaptive layer norm with an already evaluated modulation.
pub fn adaln(y: &Tensor, m: &Modulation) -> Result<Tensor> {
    if m.scale.cols() != y.cols() {
        return Err(Error::Config(format!(
            "modulation width {} does not match feature width {}",
            m.scale.cols(),
            y.cols()
        )));
    }
    layer_norm_rows(y, LAYER_NORM_EPS)?
        .mul_row_broadcast(&m.scale)?
        .add_row_broadcast(&m.shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: Option<AttentionWeights>,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
    pub adaln_self: AdaLnMap,
    pub adaln_cross: Option<AdaLnMap>,
    pub adaln_mlp: AdaLnMap,
}

impl BlockWeights {
    pub fn adaln_for(&self, kind: SublayerKind) -> Option<&AdaLnMap> {
        match kind {
            SublayerKind::SelfAttn => Some(&self.adaln_self),
            SublayerKind::CrossAttn => self.adaln_cross.as_ref(),
            SublayerKind::Mlp => Some(&self.adaln_mlp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    /// `num_classes × cond_dim`
    pub class_embed: Tensor,
    /// `cond_dim × cond_dim`, applied to the sinusoidal timestep features.
    pub time_proj: Tensor,
    /// `channels × channels` noise-prediction head.
    pub head: Tensor,
}

// Initialization scales. Chosen so 20-step DDIM trajectories stay bounded
// for arbitrary seeds (checked over 100 seeds in `tests/toy_dit.rs`).
const ADALN_SCALE: f64 = 0.15;
const ADALN_COND_STD: f64 = 0.05;
const HEAD_NOISE_STD: f64 = 0.02;

/// The toy diffusion transformer: configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDit {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// Deterministically initializes a model from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ToyDit> {
    config.validate()?;
    let n = config.channels;
    let h = config.hidden_dim();
    let d = config.cond_dim;
    let root = Rng::new(config.seed);

    let attention = |rng: &mut Rng, kv_in: usize| AttentionWeights {
        wq: gaussian_fill(rng, n, n, (1.0 / n as f64).sqrt()),
        wk: gaussian_fill(rng, kv_in, n, (1.0 / kv_in as f64).sqrt()),
        wv: gaussian_fill(rng, kv_in, n, (1.0 / kv_in as f64).sqrt()),
        wo: gaussian_fill(rng, n, n, (1.0 / n as f64).sqrt()),
    };
    let adaln_map = |rng: &mut Rng| {
        let cond_std = ADALN_COND_STD / (d as f64).sqrt();
        AdaLnMap {
            shift_w: gaussian_fill(rng, d, n, cond_std),
            shift_b: Tensor::zeros(1, n),
            scale_w: gaussian_fill(rng, d, n, cond_std),
            scale_b: Tensor::filled(1, n, ADALN_SCALE),
            gate_w: gaussian_fill(rng, d, n, cond_std),
            gate_b: Tensor::filled(1, n, ADALN_SCALE),
        }
    };

    let blocks = (0..config.depth)
        .map(|l| {
            let mut rng = root.fork(1000 + l as u64);
            let self_attn = attention(&mut rng, n);
            let cross_attn = config.has_cross_attention.then(|| attention(&mut rng, d));
            let mlp_in = gaussian_fill(&mut rng, n, h, (1.0 / n as f64).sqrt());
            let mlp_out = gaussian_fill(&mut rng, h, n, (1.0 / h as f64).sqrt());
            let adaln_self = adaln_map(&mut rng);
            let adaln_cross = config.has_cross_attention.then(|| adaln_map(&mut rng));
            let adaln_mlp = adaln_map(&mut rng);
            BlockWeights {
                self_attn,
                cross_attn,
                mlp_in,
                mlp_out,
                adaln_self,
                adaln_cross,
                adaln_mlp,
            }
        })
        .collect();

    let mut rng = root.fork(1);
    let class_embed = gaussian_fill(&mut rng, config.num_classes, d, 1.0);
    let time_proj = gaussian_fill(&mut rng, d, d, (1.0 / d as f64).sqrt());
    let head = add(
        &Tensor::identity(n),
        &gaussian_fill(&mut rng, n, n, HEAD_NOISE_STD),
    )?;

    Ok(ToyDit {
        config: config.clone(),
        weights: ModelWeights {
            blocks,
            class_embed,
            time_proj,
            head,
        },
    })
}

/// Low-frequency sinusoidal features of `timestep / train_steps`.
///
/// Frequencies are kept low so the embedding varies smoothly across the
/// coarse timestep grid a 20-step sampler visits.
pub fn timestep_features(timestep: usize, train_steps: usize, dim: usize) -> Tensor {
    let tau = timestep as f64 / train_steps.max(1) as f64;
    let half = (dim / 2).max(1);
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let ratio = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = std::f64::consts::PI * 0.5 * 8f64.powf(ratio);
        out[i] = (freq * tau).sin();
        if half + i < dim {
            out[half + i] = (freq * tau).cos();
        }
    }
    Tensor::row_vector(out)
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = q.cols() / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), q.cols());
    for h in 0..heads {
        let qh = q.col_slice(h * d, d);
        let kh = k.col_slice(h * d, d);
        let vh = v.col_slice(h * d, d);
        let scores = matmul(&qh, &kh.transpose())?.scale(scale);
        let probs = row_softmax(&scores);
        out.set_col_slice(h * d, &matmul(&probs, &vh)?);
    }
    Ok(out)
}

impl ToyDit {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        init_model(config)
    }

    /// The conditioning vector (`1 × cond_dim`) for a class at a timestep.
    pub fn cond_embed(&self, cond: &ConditionInfo, step: StepCtx) -> Result<Tensor> {
        let cfg = &self.config;
        if cond.class_id >= cfg.num_classes {
            return Err(Error::Config(format!(
                "class id {} out of range for {} classes",
                cond.class_id, cfg.num_classes
            )));
        }
        let t = timestep_features(step.timestep, step.train_steps, cfg.cond_dim);
        let t = matmul(&t, &self.weights.time_proj)?;
        let class = Tensor::row_vector(self.weights.class_embed.row(cond.class_id).to_vec());
        add(&t, &class)
    }

    /// Raw output of one sublayer, before modulation and residual.
    pub fn sublayer_forward(
        &self,
        id: SublayerId,
        input: &Tensor,
        cond: &ConditionInfo,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if input.shape() != (cfg.tokens, cfg.channels) {
            return Err(Error::ShapeMismatch {
                op: "sublayer_forward",
                lhs: input.shape(),
                rhs: (cfg.tokens, cfg.channels),
            });
        }
        let block = self.weights.blocks.get(id.block).ok_or_else(|| {
            Error::Config(format!(
                "no block {} in a depth-{} model",
                id.block, cfg.depth
            ))
        })?;
        match id.kind {
            SublayerKind::SelfAttn => {
                let w = &block.self_attn;
                let q = matmul(input, &w.wq)?;
                let k = matmul(input, &w.wk)?;
                let v = matmul(input, &w.wv)?;
                matmul(&attention(&q, &k, &v, cfg.heads)?, &w.wo)
            }
            SublayerKind::CrossAttn => {
                let w = block
                    .cross_attn
                    .as_ref()
                    .ok_or_else(|| Error::Config("model has no cross-attention".into()))?;
                let ctx = cond.context.as_ref().ok_or_else(|| {
                    Error::Config("cross-attention needs a context matrix".into())
                })?;
                let q = matmul(input, &w.wq)?;
                let k = matmul(ctx, &w.wk)?;
                let v = matmul(ctx, &w.wv)?;
                matmul(&attention(&q, &k, &v, cfg.heads)?, &w.wo)
            }
            SublayerKind::Mlp => matmul(&gelu(&matmul(input, &block.mlp_in)?), &block.mlp_out),
        }
    }

    /// One block. Raw sublayer outputs come from `interceptor`.
    pub fn block_forward(
        &self,
        l: usize,
        x: &Tensor,
        cond: &ConditionInfo,
        cond_embed: &Tensor,
        step: usize,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor> {
        let block = &self.weights.blocks[l];
        let mut h = x.clone();
        for kind in self.config.sublayer_kinds() {
            let id = SublayerId::new(l, kind);
            let map = block
                .adaln_for(kind)
                .ok_or_else(|| Error::Config(format!("missing modulation for {id}")))?;
            let modulation = map.modulation(cond_embed)?;
            let input = match self.config.adaln_placement {
                AdaLnPlacement::Output => h.clone(),
                AdaLnPlacement::Input => adaln(&h, &modulation)?,
            };
            let mut compute = || self.sublayer_forward(id, &input, cond);
            let raw = interceptor.sublayer(id, step, &mut compute)?;
            if raw.shape() != h.shape() {
                return Err(Error::Contract(format!(
                    "interceptor returned {:?} for {id}, expected {:?}",
                    raw.shape(),
                    h.shape()
                )));
            }
            let update = match self.config.adaln_placement {
                AdaLnPlacement::Output => adaln(&raw, &modulation)?,
                AdaLnPlacement::Input => raw.mul_row_broadcast(&modulation.gate)?,
            };
            h = add(&h, &update)?;
        }
        Ok(h)
    }

    /// Final linear head applied to the last block's output.
    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.weights.head)
    }

    /// Full noise prediction: every block in order, then the head.
    pub fn model_forward(
        &self,
        x: &Tensor,
        cond: &ConditionInfo,
        step: StepCtx,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor> {
        let cond_embed = self.cond_embed(cond, step)?;
        let mut h = x.clone();
        for l in 0..self.config.depth {
            h = self.block_forward(l, &h, cond, &cond_embed, step.index, interceptor)?;
        }
        self.head(&h)
    }
}

impl Denoiser for ToyDit {
    fn latent_shape(&self) -> (usize, usize) {
        (self.config.tokens, self.config.channels)
    }

    fn depth(&self) -> usize {
        self.config.depth
    }

    fn sublayer_kinds(&self) -> Vec<SublayerKind> {
        self.config.sublayer_kinds()
    }

    fn flop_model(&self) -> FlopModel {
        FlopModel::for_model(&self.config)
    }

    fn predict(
        &self,
        x: &Tensor,
        cond: &ConditionInfo,
        step: StepCtx,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor> {
        self.model_forward(x, cond, step, interceptor)
    }
}
