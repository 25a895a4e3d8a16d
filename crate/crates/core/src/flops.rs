//! Analytic FLOP accounting.
//!
//! Matrix products cost `2·m·n·k`. A computed sublayer contributes its
//! matmul cost, a normal reuse contributes nothing, and a gradient reuse
//! costs one subtract-scale-add pass (`2·m·n`) per cached tensor. Modulation,
//! residual adds and the head are paid every step whether or not anything
//! was skipped.

use serde::{Deserialize, Serialize};

use crate::cache::{AppliedStrategy, StepLog};
use crate::dit::{ModelConfig, SublayerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopModel {
    pub depth: usize,
    /// Cost of one evaluation of each sublayer kind present in a block.
    pub sublayer: Vec<(SublayerKind, u64)>,
    /// Elements in one cached tensor (`m·n`).
    pub feature_elems: u64,
    /// Modulation, residual and head cost of one full model evaluation.
    pub per_step_fixed: u64,
}

impl FlopModel {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let m = cfg.tokens as u64;
        let n = cfg.channels as u64;
        let h = cfg.hidden_dim() as u64;
        let d = cfg.cond_dim as u64;
        let p = cfg.context_tokens as u64;
        let sublayer = cfg
            .sublayer_kinds()
            .into_iter()
            .map(|kind| {
                let cost = match kind {
                    // QKV + output projections, scores and weighted sum.
                    SublayerKind::SelfAttn => 8 * m * n * n + 4 * m * m * n,
                    SublayerKind::CrossAttn => 4 * m * n * n + 4 * p * d * n + 4 * m * p * n,
                    SublayerKind::Mlp => 4 * m * n * h,
                };
                (kind, cost)
            })
            .collect::<Vec<_>>();
        // Per sublayer: three cond→channel maps, layer norm, modulation and
        // the residual add.
        let per_sublayer_fixed = 6 * d * n + 8 * m * n;
        let per_step_fixed = cfg.depth as u64 * sublayer.len() as u64 * per_sublayer_fixed
            + 2 * m * n * n
            + 2 * d * d;
        Self {
            depth: cfg.depth,
            sublayer,
            feature_elems: m * n,
            per_step_fixed,
        }
    }

    /// A stand-in cost for models without real layers: each sublayer is
    /// priced as one `n × n` projection of an `m × n` input.
    pub fn dense(depth: usize, kinds: &[SublayerKind], tokens: usize, channels: usize) -> Self {
        let (m, n) = (tokens as u64, channels as u64);
        Self {
            depth,
            sublayer: kinds.iter().map(|&k| (k, 2 * m * n * n)).collect(),
            feature_elems: m * n,
            per_step_fixed: 0,
        }
    }

    pub fn sublayer_cost(&self, kind: SublayerKind) -> u64 {
        self.sublayer
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0, |(_, c)| *c)
    }

    /// Sublayer cost of one fully computed step.
    pub fn full_step_sublayer(&self) -> u64 {
        self.depth as u64 * self.sublayer.iter().map(|(_, c)| c).sum::<u64>()
    }

    pub fn gc_tensor_overhead(&self) -> u64 {
        2 * self.feature_elems
    }

    pub fn tensors_per_step(&self) -> u64 {
        self.depth as u64 * self.sublayer.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlops {
    pub step: usize,
    pub sublayer: u64,
    pub gc_overhead: u64,
    pub fixed: u64,
}

impl StepFlops {
    pub fn total(&self) -> u64 {
        self.sublayer + self.gc_overhead + self.fixed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopTotals {
    pub per_step: Vec<StepFlops>,
    /// Sublayer cost of the same number of steps with no caching.
    pub baseline_sublayer: u64,
}

impl FlopTotals {
    pub fn sublayer(&self) -> u64 {
        self.per_step.iter().map(|s| s.sublayer).sum()
    }

    pub fn gc_overhead(&self) -> u64 {
        self.per_step.iter().map(|s| s.gc_overhead).sum()
    }

    pub fn fixed(&self) -> u64 {
        self.per_step.iter().map(|s| s.fixed).sum()
    }

    pub fn total(&self) -> u64 {
        self.per_step.iter().map(StepFlops::total).sum()
    }

    pub fn baseline_total(&self) -> u64 {
        self.baseline_sublayer + self.fixed()
    }

    /// Speedup counting only the cacheable work (sublayers plus the
    /// extrapolation overhead).
    pub fn sublayer_speedup(&self) -> f64 {
        self.baseline_sublayer as f64 / (self.sublayer() + self.gc_overhead()) as f64
    }

    /// Speedup including the per-step fixed cost.
    pub fn total_speedup(&self) -> f64 {
        self.baseline_total() as f64 / self.total() as f64
    }
}

/// Counts FLOPs for a run whose per-step strategies are `applied`.
pub fn flops_count(model: &FlopModel, applied: &[AppliedStrategy]) -> FlopTotals {
    let per_step = applied
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (sublayer, gc_overhead) = match a {
                AppliedStrategy::Compute => (model.full_step_sublayer(), 0),
                AppliedStrategy::Normal => (0, 0),
                AppliedStrategy::Gc => (0, model.tensors_per_step() * model.gc_tensor_overhead()),
            };
            StepFlops {
                step: i + 1,
                sublayer,
                gc_overhead,
                fixed: model.per_step_fixed,
            }
        })
        .collect();
    FlopTotals {
        per_step,
        baseline_sublayer: applied.len() as u64 * model.full_step_sublayer(),
    }
}

/// FLOPs actually spent according to an engine's step log.
pub fn flops_from_log(model: &FlopModel, log: &[StepLog]) -> FlopTotals {
    let per_step = log
        .iter()
        .map(|s| {
            let computed: u64 = s
                .computed
                .iter()
                .map(|&kind| model.sublayer_cost(kind))
                .sum();
            StepFlops {
                step: s.step,
                sublayer: computed,
                gc_overhead: s.gc_reuses as u64 * model.gc_tensor_overhead(),
                fixed: model.per_step_fixed,
            }
        })
        .collect();
    FlopTotals {
        per_step,
        baseline_sublayer: log.len() as u64 * model.full_step_sublayer(),
    }
}
