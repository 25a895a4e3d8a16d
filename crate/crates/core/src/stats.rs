//! Offline profiling: run uncached sampling over several prompts, average
//! each sublayer's raw output per step, and count the blocks whose
//! first-order extrapolation would move away from the next step's average
//! ("inverse gradient").

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{gc_extrapolate, CacheEngine};
use crate::dit::{ConditionInfo, Denoiser, SublayerId};
use crate::error::{Error, Result};
use crate::numerics::{l1_total, Tensor};
use crate::sampler::{sample, SamplerConfig};

/// Features of one prompt at one step, keyed by sublayer.
pub type StepFeatures = BTreeMap<SublayerId, Tensor>;

/// Raw sublayer outputs for every prompt, step and sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLog {
    pub step_count: usize,
    pub ids: Vec<SublayerId>,
    /// `runs[k][t − 1]`
    pub runs: Vec<Vec<StepFeatures>>,
}

impl FeatureLog {
    pub fn prompt_count(&self) -> usize {
        self.runs.len()
    }

    pub fn get(&self, prompt: usize, step: usize, id: SublayerId) -> Option<&Tensor> {
        self.runs.get(prompt)?.get(step.checked_sub(1)?)?.get(&id)
    }

    pub fn entry_count(&self) -> usize {
        self.runs.iter().flatten().map(BTreeMap::len).sum()
    }
}

/// Runs uncached sampling for every prompt and records raw outputs.
pub fn profile(
    model: &dyn Denoiser,
    settings: &SamplerConfig,
    prompts: &[ConditionInfo],
) -> Result<FeatureLog> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput(
            "profiling needs at least one prompt".into(),
        ));
    }
    let sched = settings.schedule()?;
    let runs = prompts
        .par_iter()
        .map(|cond| {
            let mut engine =
                CacheEngine::all_compute(settings.step_count).with_feature_recording(true);
            sample(model, cond, &sched, settings, &mut engine)?;
            Ok(engine.take_features())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureLog {
        step_count: settings.step_count,
        ids: model.sublayer_ids(),
        runs,
    })
}

/// Per-step, per-sublayer mean over prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Averages {
    pub step_count: usize,
    pub ids: Vec<SublayerId>,
    /// `steps[t − 1]`
    pub steps: Vec<StepFeatures>,
}

impl Averages {
    pub fn get(&self, step: usize, id: SublayerId) -> Option<&Tensor> {
        self.steps.get(step.checked_sub(1)?)?.get(&id)
    }

    pub fn depth(&self) -> usize {
        self.ids.iter().map(|id| id.block + 1).max().unwrap_or(0)
    }
}

/// Elementwise mean over prompts of every logged feature. Each element's
/// values are summed in sorted order, so the result does not depend on the
/// order of the prompts.
pub fn average_features(log: &FeatureLog) -> Result<Averages> {
    let k = log.prompt_count();
    if k == 0 {
        return Err(Error::EmptyInput("feature log has no prompts".into()));
    }
    let mut steps = Vec::with_capacity(log.step_count);
    for t in 1..=log.step_count {
        let mut avg = StepFeatures::new();
        for &id in &log.ids {
            let feats = (0..k)
                .map(|p| {
                    log.get(p, t, id)
                        .ok_or_else(|| Error::IncompleteLog(format!("prompt {p}, step {t}, {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let shape = feats[0].shape();
            if let Some(bad) = feats.iter().find(|f| f.shape() != shape) {
                return Err(Error::ShapeMismatch {
                    op: "average_features",
                    lhs: shape,
                    rhs: bad.shape(),
                });
            }
            let mut column = vec![0.0; k];
            let data = (0..feats[0].len())
                .map(|i| {
                    for (c, f) in column.iter_mut().zip(&feats) {
                        *c = f.data()[i];
                    }
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / k as f64
                })
                .collect();
            avg.insert(id, Tensor::from_vec(shape.0, shape.1, data)?);
        }
        steps.push(avg);
    }
    Ok(Averages {
        step_count: log.step_count,
        ids: log.ids.clone(),
        steps,
    })
}

/// The two error terms of the inverse-gradient test: `J(next − curr)` and
/// `J(next − (curr + η·(curr − prev)))`.
pub fn gradient_terms(prev: &Tensor, curr: &Tensor, next: &Tensor, eta: f64) -> Result<(f64, f64)> {
    let hold = l1_total(&next.sub(curr)?);
    let extrapolated = gc_extrapolate(prev, curr, eta)?;
    Ok((hold, l1_total(&next.sub(&extrapolated)?)))
}

/// True when extrapolating from `prev → curr` does *not* strictly beat
/// holding `curr` as a predictor of `next`.
pub fn is_inverse_gradient(prev: &Tensor, curr: &Tensor, next: &Tensor, eta: f64) -> Result<bool> {
    let (hold, extrapolated) = gradient_terms(prev, curr, next, eta)?;
    Ok(!(hold > extrapolated))
}

/// Inverse-gradient counts per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    #[serde(rename = "L")]
    pub depth: usize,
    pub step_count: usize,
    /// Inverse blocks at each step (index `t − 1`).
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    #[serde(rename = "N_hat")]
    pub n_hat: Vec<f64>,
    /// Feed `N̂` (true) or the raw count (false) to the policy.
    #[serde(default = "default_true")]
    pub normalize_n: bool,
}

fn default_true() -> bool {
    true
}

impl StatsTable {
    pub fn count(&self, step: usize) -> Option<usize> {
        self.n.get(step.checked_sub(1)?).copied()
    }

    /// The value the policy uses for step `t`.
    pub fn policy_value(&self, step: usize) -> Option<f64> {
        let i = step.checked_sub(1)?;
        if self.normalize_n {
            self.n_hat.get(i).copied()
        } else {
            self.n.get(i).map(|&c| c as f64)
        }
    }

    pub fn from_counts(k: usize, eta: f64, depth: usize, n: Vec<usize>) -> Self {
        let n_hat = n.iter().map(|&c| c as f64 / depth.max(1) as f64).collect();
        Self {
            k,
            eta,
            depth,
            step_count: n.len(),
            n,
            n_hat,
            normalize_n: true,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.n.len() != t.step_count || t.n_hat.len() != t.step_count {
            return Err(Error::IncompleteStats(format!(
                "stats declare {} steps but carry {} counts and {} fractions",
                t.step_count,
                t.n.len(),
                t.n_hat.len()
            )));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Whether block `block` shows an inverse gradient going into `step`, with
/// the error terms summed over the block's sublayers.
pub fn block_is_inverse(averages: &Averages, block: usize, step: usize, eta: f64) -> Result<bool> {
    if step < 3 {
        return Ok(false);
    }
    let (mut hold, mut extrapolated) = (0.0, 0.0);
    for id in averages.ids.iter().filter(|id| id.block == block) {
        let at = |t: usize| {
            averages
                .get(t, *id)
                .ok_or_else(|| Error::IncompleteLog(format!("no average for {id} at step {t}")))
        };
        let (h, e) = gradient_terms(at(step - 2)?, at(step - 1)?, at(step)?, eta)?;
        hold += h;
        extrapolated += e;
    }
    Ok(!(hold > extrapolated))
}

/// Counts inverse-gradient blocks at each step. Steps 1 and 2 have no
/// gradient history and count as zero.
pub fn count_inverse(averages: &Averages, eta: f64, depth: usize, k: usize) -> Result<StatsTable> {
    let mut n = Vec::with_capacity(averages.step_count);
    for step in 1..=averages.step_count {
        let mut count = 0;
        for block in 0..depth {
            if block_is_inverse(averages, block, step, eta)? {
                count += 1;
            }
        }
        n.push(count);
    }
    Ok(StatsTable::from_counts(k, eta, depth, n))
}

/// Profile, average and count in one go.
pub fn build_stats(
    model: &dyn Denoiser,
    settings: &SamplerConfig,
    prompts: &[ConditionInfo],
    eta: f64,
) -> Result<StatsTable> {
    let log = profile(model, settings, prompts)?;
    let averages = average_features(&log)?;
    count_inverse(&averages, eta, model.depth(), prompts.len())
}
