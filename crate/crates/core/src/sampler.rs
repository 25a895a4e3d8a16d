//! Noise schedules and the reverse diffusion loop.
//!
//! Sampling steps are numbered 1..=step_count in generation order: step 1
//! is the noisiest. The mapping to diffusion timesteps is internal.

use serde::{Deserialize, Serialize};

use crate::cache::{CacheEngine, StepLog};
use crate::dit::{ConditionInfo, Denoiser, Interceptor, StepCtx};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_fill, Rng, Tensor};

const LATENT_STREAM: u64 = 0x1a7e_0001;
const DDPM_NOISE_STREAM: u64 = 0x1a7e_0002;

/// Linear beta schedule and its running products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ` at `t`, with `None` standing for the clean end of the chain.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }
}

pub fn make_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if train_steps < 2 {
        return Err(Error::Config(format!(
            "need at least 2 diffusion steps, got {train_steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let last = (train_steps - 1) as f64;
    let betas: Vec<f64> = (0..train_steps)
        .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// One ancestral DDPM step from `t` to `t − 1`. `noise = None` returns the
/// posterior mean.
pub fn ddpm_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Ordering("step 0 has no predecessor".into()));
    }
    if t >= sched.len() {
        return Err(Error::Config(format!(
            "timestep {t} outside a {}-step schedule",
            sched.len()
        )));
    }
    check_shape("ddpm_step", x_t, eps)?;
    if let Some(n) = noise {
        check_shape("ddpm_step", x_t, n)?;
    }
    let alpha = sched.alphas[t];
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bars[t]).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = sched.betas[t].sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let mean = inv_sqrt_alpha * (x - coef * e);
            match noise {
                Some(n) => mean + sigma * n.data()[i],
                None => mean,
            }
        })
        .collect();
    Tensor::from_vec(x_t.rows(), x_t.cols(), data)
}

/// Deterministic DDIM update from `t` to `t_prev` (`None` = fully denoised).
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::Ordering(format!("DDIM target {p} must precede {t}")));
        }
    }
    if t >= sched.len() {
        return Err(Error::Config(format!(
            "timestep {t} outside a {}-step schedule",
            sched.len()
        )));
    }
    check_shape("ddim_step", x_t, eps)?;
    let ab = sched.alpha_bars[t];
    let ab_prev = sched.alpha_bar(t_prev);
    let (sqrt_ab, sqrt_1m_ab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sqrt_ab_prev, sqrt_1m_ab_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let x0 = (x - sqrt_1m_ab * e) / sqrt_ab;
            sqrt_ab_prev * x0 + sqrt_1m_ab_prev * e
        })
        .collect();
    Tensor::from_vec(x_t.rows(), x_t.cols(), data)
}

fn check_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    /// Ancestral sampling over the last `step_count` consecutive timesteps.
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub step_count: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            step_count: 20,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end)
    }

    /// Diffusion timestep visited at each generation-order step.
    pub fn timesteps(&self) -> Result<Vec<usize>> {
        let n = self.step_count;
        if n == 0 {
            return Err(Error::Config("step_count must be positive".into()));
        }
        match self.kind {
            SamplerKind::Ddim => {
                if n > self.train_steps {
                    return Err(Error::Config(format!(
                        "{n} sampling steps exceed {} diffusion steps",
                        self.train_steps
                    )));
                }
                let stride = self.train_steps / n;
                Ok((1..=n).map(|i| (n - i) * stride).collect())
            }
            SamplerKind::Ddpm => {
                if n >= self.train_steps {
                    return Err(Error::Config(format!(
                        "DDPM needs step_count < {} diffusion steps, got {n}",
                        self.train_steps
                    )));
                }
                Ok((1..=n).map(|i| n + 1 - i).collect())
            }
        }
    }
}

/// The initial noise latent for a sample.
pub fn initial_latent(cond: &ConditionInfo, shape: (usize, usize)) -> Tensor {
    gaussian_fill(
        &mut Rng::new(cond.seed).fork(LATENT_STREAM),
        shape.0,
        shape.1,
        1.0,
    )
}

/// Latents visited by one sampling run plus the cache's per-step log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    /// `latents[0]` is the initial noise; `latents[i]` follows step `i`.
    pub latents: Vec<Tensor>,
    pub steps: Vec<StepLog>,
}

impl Trajectory {
    pub fn final_latent(&self) -> &Tensor {
        self.latents
            .last()
            .expect("trajectory has the initial latent")
    }
}

/// Runs the reverse loop with an arbitrary interceptor.
pub fn sample_with(
    model: &dyn Denoiser,
    cond: &ConditionInfo,
    sched: &NoiseSchedule,
    settings: &SamplerConfig,
    interceptor: &mut dyn Interceptor,
) -> Result<Trajectory> {
    let timesteps = settings.timesteps()?;
    if timesteps.iter().any(|&t| t >= sched.len()) {
        return Err(Error::Config(
            "sampler timesteps exceed the noise schedule".into(),
        ));
    }
    let mut x = initial_latent(cond, model.latent_shape());
    let mut latents = Vec::with_capacity(timesteps.len() + 1);
    latents.push(x.clone());
    let noise_rng = Rng::new(cond.seed).fork(DDPM_NOISE_STREAM);
    for (i, &t) in timesteps.iter().enumerate() {
        let ctx = StepCtx {
            index: i + 1,
            timestep: t,
            train_steps: sched.len(),
        };
        let eps = model.predict(&x, cond, ctx, interceptor)?;
        eps.ensure_finite(&format!("noise prediction at step {}", i + 1))?;
        x = match settings.kind {
            SamplerKind::Ddim => ddim_step(&x, &eps, t, timesteps.get(i + 1).copied(), sched)?,
            SamplerKind::Ddpm => {
                let noise = gaussian_fill(&mut noise_rng.fork(t as u64), x.rows(), x.cols(), 1.0);
                ddpm_step(&x, &eps, t, sched, Some(&noise))?
            }
        };
        x.ensure_finite(&format!("latent after step {}", i + 1))?;
        latents.push(x.clone());
    }
    Ok(Trajectory {
        timesteps,
        latents,
        steps: Vec::new(),
    })
}

/// Runs the reverse loop through a cache engine and attaches its log.
pub fn sample(
    model: &dyn Denoiser,
    cond: &ConditionInfo,
    sched: &NoiseSchedule,
    settings: &SamplerConfig,
    engine: &mut CacheEngine,
) -> Result<Trajectory> {
    if engine.schedule().len() != settings.step_count {
        return Err(Error::Config(format!(
            "cache schedule covers {} steps but the sampler runs {}",
            engine.schedule().len(),
            settings.step_count
        )));
    }
    let mut traj = sample_with(model, cond, sched, settings, engine)?;
    traj.steps = engine.log().to_vec();
    Ok(traj)
}
