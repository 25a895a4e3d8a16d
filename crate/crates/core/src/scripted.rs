//! A stand-in model whose sublayer outputs are closed-form functions of the
//! step index, `f(t)·M_l`, with `M_l` a fixed seeded pattern per block.
//! It gives exact ground truth for reuse errors and gradient statistics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cache::{Action, AppliedStrategy, CacheSchedule, GcConfig, QueueMode, Strategy};
use crate::dit::{ConditionInfo, Denoiser, Interceptor, StepCtx, SublayerId, SublayerKind};
use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::numerics::{gaussian_fill, l1_total, lincomb, Rng, Tensor};
use crate::policy::StrategyPlan;

/// Scalar trajectory of one sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Const {
        a: f64,
    },
    Affine {
        a: f64,
        b: f64,
    },
    Quadratic {
        a: f64,
        b: f64,
        c: f64,
    },
    Sine {
        amplitude: f64,
        period: f64,
        phase: f64,
    },
    Alternating {
        a: f64,
    },
}

impl Family {
    pub fn value(&self, t: usize) -> f64 {
        let tf = t as f64;
        match *self {
            Family::Const { a } => a,
            Family::Affine { a, b } => a + b * tf,
            Family::Quadratic { a, b, c } => a + b * tf + c * tf * tf,
            Family::Sine {
                amplitude,
                period,
                phase,
            } => amplitude * (2.0 * PI * tf / period + phase).sin(),
            Family::Alternating { a } => {
                if t.is_multiple_of(2) {
                    a
                } else {
                    -a
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Const { .. } => "const",
            Family::Affine { .. } => "affine",
            Family::Quadratic { .. } => "quadratic",
            Family::Sine { .. } => "sine",
            Family::Alternating { .. } => "alternating",
        }
    }

    fn validate(&self) -> Result<()> {
        let coeffs: Vec<f64> = match *self {
            Family::Const { a } | Family::Alternating { a } => vec![a],
            Family::Affine { a, b } => vec![a, b],
            Family::Quadratic { a, b, c } => vec![a, b, c],
            Family::Sine {
                amplitude,
                period,
                phase,
            } => {
                if !(period > 0.0) {
                    return Err(Error::Config(format!(
                        "sine period must be positive, got {period}"
                    )));
                }
                vec![amplitude, period, phase]
            }
        };
        if coeffs.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "non-finite {} coefficient",
                self.name()
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScript {
    pub self_attn: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attn: Option<Family>,
    pub mlp: Family,
}

impl BlockScript {
    pub fn uniform(family: Family, with_cross: bool) -> Self {
        Self {
            self_attn: family,
            cross_attn: with_cross.then_some(family),
            mlp: family,
        }
    }

    pub fn family(&self, kind: SublayerKind) -> Option<Family> {
        match kind {
            SublayerKind::SelfAttn => Some(self.self_attn),
            SublayerKind::CrossAttn => self.cross_attn,
            SublayerKind::Mlp => Some(self.mlp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSpec {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub blocks: Vec<BlockScript>,
}

impl ScriptSpec {
    /// Every sublayer of every block follows `family`.
    pub fn uniform(
        depth: usize,
        family: Family,
        with_cross: bool,
        shape: (usize, usize),
        seed: u64,
    ) -> Self {
        Self {
            rows: shape.0,
            cols: shape.1,
            seed,
            blocks: vec![BlockScript::uniform(family, with_cross); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn has_cross_attention(&self) -> bool {
        self.blocks.first().is_some_and(|b| b.cross_attn.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(
                "script needs at least one block and a non-empty shape".into(),
            ));
        }
        let cross = self.has_cross_attention();
        for (l, b) in self.blocks.iter().enumerate() {
            if b.cross_attn.is_some() != cross {
                return Err(Error::Config(format!(
                    "block {l} disagrees on cross-attention"
                )));
            }
            for kind in SublayerKind::for_block(cross) {
                b.family(kind).expect("present").validate()?;
            }
        }
        Ok(())
    }

    /// The fixed pattern `M_l` of block `l`.
    pub fn pattern(&self, block: usize) -> Tensor {
        gaussian_fill(
            &mut Rng::new(self.seed).fork(block as u64),
            self.rows,
            self.cols,
            1.0,
        )
    }

    pub fn family(&self, id: SublayerId) -> Option<Family> {
        self.blocks.get(id.block)?.family(id.kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// `f(t)·M_l` for the sublayer `id`.
pub fn scripted_output(spec: &ScriptSpec, id: SublayerId, t: usize) -> Result<Tensor> {
    let family = spec
        .family(id)
        .ok_or_else(|| Error::Config(format!("script has no entry for {id}")))?;
    Ok(spec.pattern(id.block).scale(family.value(t)))
}

/// A random script mixing all five families.
pub fn random_spec(seed: u64, depth: usize, with_cross: bool, shape: (usize, usize)) -> ScriptSpec {
    let mut rng = Rng::new(seed).fork(0x5c817);
    let coeff = |rng: &mut Rng| 4.0 * rng.next_uniform() - 2.0;
    let family = |rng: &mut Rng| match rng.next_u64() % 5 {
        0 => Family::Const { a: coeff(rng) },
        1 => Family::Affine {
            a: coeff(rng),
            b: coeff(rng),
        },
        2 => Family::Quadratic {
            a: coeff(rng),
            b: coeff(rng),
            c: 0.2 * coeff(rng),
        },
        3 => Family::Sine {
            amplitude: coeff(rng),
            period: 2.0 + 18.0 * rng.next_uniform(),
            phase: 2.0 * PI * rng.next_uniform(),
        },
        _ => Family::Alternating { a: coeff(rng) },
    };
    let blocks = (0..depth)
        .map(|_| BlockScript {
            self_attn: family(&mut rng),
            cross_attn: if with_cross {
                Some(family(&mut rng))
            } else {
                None
            },
            mlp: family(&mut rng),
        })
        .collect();
    ScriptSpec {
        rows: shape.0,
        cols: shape.1,
        seed,
        blocks,
    }
}

/// Denoiser whose sublayers ignore their input. The noise prediction is the
/// mean of the block outputs, so the latent still reflects what the cache
/// supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedModel {
    spec: ScriptSpec,
    patterns: Vec<Tensor>,
}

impl ScriptedModel {
    pub fn new(spec: ScriptSpec) -> Result<Self> {
        spec.validate()?;
        let patterns = (0..spec.depth()).map(|l| spec.pattern(l)).collect();
        Ok(Self { spec, patterns })
    }

    pub fn spec(&self) -> &ScriptSpec {
        &self.spec
    }
}

impl Denoiser for ScriptedModel {
    fn latent_shape(&self) -> (usize, usize) {
        (self.spec.rows, self.spec.cols)
    }

    fn depth(&self) -> usize {
        self.spec.depth()
    }

    fn sublayer_kinds(&self) -> Vec<SublayerKind> {
        SublayerKind::for_block(self.spec.has_cross_attention())
    }

    fn flop_model(&self) -> FlopModel {
        FlopModel::dense(
            self.depth(),
            &self.sublayer_kinds(),
            self.spec.rows,
            self.spec.cols,
        )
    }

    fn predict(
        &self,
        _x: &Tensor,
        _cond: &ConditionInfo,
        step: StepCtx,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor> {
        let ids = self.sublayer_ids();
        let mut acc = vec![0.0; self.spec.rows * self.spec.cols];
        for &id in &ids {
            let family = self.spec.family(id).expect("validated");
            let pattern = &self.patterns[id.block];
            let out = interceptor.sublayer(id, step.index, &mut || {
                Ok(pattern.scale(family.value(step.index)))
            })?;
            if out.shape() != pattern.shape() {
                return Err(Error::Contract(format!(
                    "{id}: substitute has shape {:?}",
                    out.shape()
                )));
            }
            for (a, v) in acc.iter_mut().zip(out.data()) {
                *a += v;
            }
        }
        let n = ids.len() as f64;
        Tensor::from_vec(
            self.spec.rows,
            self.spec.cols,
            acc.into_iter().map(|v| v / n).collect(),
        )
    }
}

/// Wraps a model and adds `f(t)·M_l` to the raw output of every sublayer
/// in the listed blocks, before the cache sees it.
#[derive(Debug, Clone)]
pub struct Contaminated<D> {
    base: D,
    /// `(block, family)` pairs; the pattern is seeded per block.
    pub blocks: Vec<(usize, Family)>,
    pub seed: u64,
    patterns: Vec<Tensor>,
}

impl<D: Denoiser> Contaminated<D> {
    pub fn new(base: D, blocks: Vec<(usize, Family)>, seed: u64) -> Result<Self> {
        let (rows, cols) = base.latent_shape();
        for &(l, f) in &blocks {
            if l >= base.depth() {
                return Err(Error::Config(format!(
                    "contaminated block {l} exceeds depth {}",
                    base.depth()
                )));
            }
            f.validate()?;
        }
        let patterns = blocks
            .iter()
            .map(|&(l, _)| gaussian_fill(&mut Rng::new(seed).fork(l as u64), rows, cols, 1.0))
            .collect();
        Ok(Self {
            base,
            blocks,
            seed,
            patterns,
        })
    }

    pub fn base(&self) -> &D {
        &self.base
    }
}

struct AddScript<'a> {
    inner: &'a mut dyn Interceptor,
    blocks: &'a [(usize, Family)],
    patterns: &'a [Tensor],
}

impl Interceptor for AddScript<'_> {
    fn sublayer(
        &mut self,
        id: SublayerId,
        step: usize,
        compute: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<Tensor> {
        let extra: Vec<(f64, &Tensor)> = self
            .blocks
            .iter()
            .zip(self.patterns)
            .filter(|((l, _), _)| *l == id.block)
            .map(|((_, f), m)| (f.value(step), m))
            .collect();
        let mut contaminated = || {
            let mut v = compute()?;
            for &(a, m) in &extra {
                v = lincomb(1.0, &v, a, m)?;
            }
            Ok(v)
        };
        self.inner.sublayer(id, step, &mut contaminated)
    }
}

impl<D: Denoiser> Denoiser for Contaminated<D> {
    fn latent_shape(&self) -> (usize, usize) {
        self.base.latent_shape()
    }

    fn depth(&self) -> usize {
        self.base.depth()
    }

    fn sublayer_kinds(&self) -> Vec<SublayerKind> {
        self.base.sublayer_kinds()
    }

    fn flop_model(&self) -> FlopModel {
        self.base.flop_model()
    }

    fn predict(
        &self,
        x: &Tensor,
        cond: &ConditionInfo,
        step: StepCtx,
        interceptor: &mut dyn Interceptor,
    ) -> Result<Tensor> {
        let mut wrapped = AddScript {
            inner: interceptor,
            blocks: &self.blocks,
            patterns: &self.patterns,
        };
        self.base.predict(x, cond, step, &mut wrapped)
    }
}

/// Closed-form reuse errors of one block at one skip step, summed over its
/// sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ExactBlockError {
    pub used: f64,
    pub normal: f64,
    pub gc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactStepError {
    pub step: usize,
    pub applied: AppliedStrategy,
    pub blocks: Vec<ExactBlockError>,
}

impl ExactStepError {
    pub fn normal(&self) -> f64 {
        self.blocks.iter().map(|b| b.normal).sum()
    }

    pub fn gc(&self) -> Option<f64> {
        self.blocks.iter().map(|b| b.gc).sum()
    }

    pub fn used(&self) -> f64 {
        self.blocks.iter().map(|b| b.used).sum()
    }
}

/// Replays the cache on scalar coefficients: every value the engine would
/// hold is `s·M_l`, so each error is `|Δs|·J(M_l)`.
pub fn exact_cache_errors(
    spec: &ScriptSpec,
    schedule: &CacheSchedule,
    cfg: &GcConfig,
    plan: Option<&StrategyPlan>,
) -> Result<Vec<ExactStepError>> {
    spec.validate()?;
    let kinds = SublayerKind::for_block(spec.has_cross_attention());
    let norms: Vec<f64> = (0..spec.depth())
        .map(|l| l1_total(&spec.pattern(l)))
        .collect();
    // Per sublayer: queued (step, coefficient), newest last.
    let mut queues: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); kinds.len()]; spec.depth()];
    let mut out = Vec::new();
    for (i, &action) in schedule.actions().iter().enumerate() {
        let t = i + 1;
        let strategy = match action {
            Action::Compute => {
                for (l, block) in queues.iter_mut().enumerate() {
                    for (k, q) in block.iter_mut().enumerate() {
                        let f = spec.blocks[l].family(kinds[k]).expect("validated");
                        push2(q, (t, f.value(t)));
                    }
                }
                continue;
            }
            Action::Skip(Strategy::GocDecided) => plan
                .and_then(|p| p.resolved(t))
                .ok_or_else(|| Error::IncompleteStats(format!("no plan decision for step {t}")))?,
            Action::Skip(s) => s,
        };
        let mut blocks = Vec::with_capacity(spec.depth());
        let mut applied = AppliedStrategy::Normal;
        for (l, block) in queues.iter_mut().enumerate() {
            let mut err = ExactBlockError {
                gc: Some(0.0),
                ..ExactBlockError::default()
            };
            for (k, q) in block.iter_mut().enumerate() {
                let exact = spec.blocks[l].family(kinds[k]).expect("validated").value(t);
                let &(newest_step, held) = q
                    .last()
                    .ok_or(Error::ColdCache(SublayerId::new(l, kinds[k]), t))?;
                let extrapolated = (q.len() >= 2).then(|| {
                    let (old_step, old) = q[q.len() - 2];
                    let factor = if cfg.gap_normalize {
                        cfg.eta * (t - newest_step) as f64 / (newest_step - old_step) as f64
                    } else {
                        cfg.eta
                    };
                    held + factor * (held - old)
                });
                let use_gc = strategy == Strategy::Gc && extrapolated.is_some();
                let used = if use_gc {
                    extrapolated.expect("checked")
                } else {
                    held
                };
                if use_gc {
                    applied = AppliedStrategy::Gc;
                }
                err.normal += (held - exact).abs() * norms[l];
                err.used += (used - exact).abs() * norms[l];
                err.gc = match (err.gc, extrapolated) {
                    (Some(acc), Some(g)) => Some(acc + (g - exact).abs() * norms[l]),
                    _ => None,
                };
                if cfg.queue_mode == QueueMode::Effective {
                    push2(q, (t, used));
                }
            }
            blocks.push(err);
        }
        out.push(ExactStepError {
            step: t,
            applied,
            blocks,
        });
    }
    Ok(out)
}

fn push2(q: &mut Vec<(usize, f64)>, entry: (usize, f64)) {
    q.push(entry);
    if q.len() > 2 {
        q.remove(0);
    }
}
