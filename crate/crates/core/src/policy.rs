//! Per-step choice between gradient extrapolation and plain reuse.
//!
//! Each skipped step gets a negative-impact score
//! `B(t) = γ·(1 − t/T) + (1 − γ)·N̂(t)` and uses extrapolation only when
//! `B(t) < Γ`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{Action, CacheSchedule, Strategy};
use crate::error::{Error, Result};
use crate::stats::StatsTable;
use crate::table::{read_rows, write_rows};

/// Orientation of the position term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSense {
    /// `1 − t/T`: late steps score low and favour extrapolation.
    #[default]
    Remaining,
    /// `t/T`: late steps score high and favour plain reuse.
    Elapsed,
}

impl FromStr for PositionSense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "remaining" => Ok(Self::Remaining),
            "elapsed" => Ok(Self::Elapsed),
            other => Err(Error::Parse(format!("unknown position sense `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GodConfig {
    pub gamma: f64,
    pub threshold: f64,
    pub position_sense: PositionSense,
}

impl Default for GodConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            threshold: 0.5,
            position_sense: PositionSense::Remaining,
        }
    }
}

impl GodConfig {
    pub fn new(gamma: f64, threshold: f64) -> Self {
        Self {
            gamma,
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.threshold.is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(())
    }
}

fn position_term(t: usize, total: usize, sense: PositionSense) -> f64 {
    let frac = t as f64 / total as f64;
    match sense {
        PositionSense::Remaining => 1.0 - frac,
        PositionSense::Elapsed => frac,
    }
}

/// `γ·(1 − t/T) + (1 − γ)·n_hat` with range checks on every input.
pub fn negative_impact(t: usize, total: usize, n_hat: f64, gamma: f64) -> Result<f64> {
    if t == 0 || t > total {
        return Err(Error::Domain(format!("step {t} outside 1..={total}")));
    }
    if !(0.0..=1.0).contains(&n_hat) {
        return Err(Error::Domain(format!(
            "n_hat must lie in [0, 1], got {n_hat}"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(score(t, total, n_hat, gamma, PositionSense::Remaining))
}

fn score(t: usize, total: usize, n: f64, gamma: f64, sense: PositionSense) -> f64 {
    gamma * position_term(t, total, sense) + (1.0 - gamma) * n
}

/// Policy bound to one set of profiled statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GodPolicy {
    config: GodConfig,
    stats: StatsTable,
}

impl GodPolicy {
    pub fn new(config: GodConfig, stats: StatsTable) -> Result<Self> {
        config.validate()?;
        if stats.step_count == 0 {
            return Err(Error::IncompleteStats("stats cover no steps".into()));
        }
        Ok(Self { config, stats })
    }

    pub fn config(&self) -> &GodConfig {
        &self.config
    }

    pub fn stats(&self) -> &StatsTable {
        &self.stats
    }

    pub fn total_steps(&self) -> usize {
        self.stats.step_count
    }

    /// Score of step `t`.
    pub fn b_value(&self, t: usize) -> Result<f64> {
        let total = self.total_steps();
        if t == 0 || t > total {
            return Err(Error::Domain(format!("step {t} outside 1..={total}")));
        }
        let n = self.stats.policy_value(t).ok_or_else(|| {
            Error::IncompleteStats(format!("no inverse-gradient count for step {t}"))
        })?;
        Ok(score(
            t,
            total,
            n,
            self.config.gamma,
            self.config.position_sense,
        ))
    }

    /// `Gc` when the score is under the threshold, `Normal` otherwise.
    pub fn decide(&self, t: usize) -> Result<Strategy> {
        Ok(if self.b_value(t)? < self.config.threshold {
            Strategy::Gc
        } else {
            Strategy::Normal
        })
    }

    /// Resolves every skip step of `schedule`. Policy-decided steps consult
    /// the score; fixed strategies pass through unchanged.
    pub fn build_plan(&self, schedule: &CacheSchedule) -> Result<StrategyPlan> {
        if schedule.len() != self.total_steps() {
            return Err(Error::Config(format!(
                "schedule has {} steps but stats were profiled over {}; re-run `profile` with matching step_count",
                schedule.len(),
                self.total_steps()
            )));
        }
        let mut entries = Vec::new();
        for (i, &action) in schedule.actions().iter().enumerate() {
            let step = i + 1;
            if let Action::Skip(strategy) = action {
                let (resolved, b_value) = match strategy {
                    Strategy::GocDecided => (self.decide(step)?, Some(self.b_value(step)?)),
                    fixed => (fixed, None),
                };
                entries.push(PlanEntry {
                    step,
                    requested: strategy,
                    resolved,
                    b_value,
                });
            }
        }
        Ok(StrategyPlan {
            steps: schedule.len(),
            entries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub step: usize,
    pub requested: Strategy,
    /// `Normal` or `Gc`.
    pub resolved: Strategy,
    pub b_value: Option<f64>,
}

/// Resolved strategies for the skip steps of one schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub steps: usize,
    pub entries: Vec<PlanEntry>,
}

pub const PLAN_HEADER: &str = "step,action,resolved_strategy,B_value";

impl StrategyPlan {
    /// Plan for a schedule whose skips all carry a fixed strategy.
    pub fn fixed(schedule: &CacheSchedule) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, &action) in schedule.actions().iter().enumerate() {
            match action {
                Action::Compute => {}
                Action::Skip(Strategy::GocDecided) => {
                    return Err(Error::Config(format!(
                        "step {} is policy-decided; a fixed plan needs a fixed strategy",
                        i + 1
                    )))
                }
                Action::Skip(s) => entries.push(PlanEntry {
                    step: i + 1,
                    requested: s,
                    resolved: s,
                    b_value: None,
                }),
            }
        }
        Ok(Self {
            steps: schedule.len(),
            entries,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, step: usize) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.step == step)
    }

    pub fn resolved(&self, step: usize) -> Option<Strategy> {
        self.entry(step).map(|e| e.resolved)
    }

    pub fn b_value(&self, step: usize) -> Option<f64> {
        self.entry(step).and_then(|e| e.b_value)
    }

    /// `(step, strategy)` for every skip step, for plan-level comparison.
    pub fn resolved_strategies(&self) -> Vec<(usize, Strategy)> {
        self.entries.iter().map(|e| (e.step, e.resolved)).collect()
    }

    /// One row per schedule step; compute steps carry `none` and no score.
    pub fn to_csv(&self) -> Result<String> {
        let rows = (1..=self.steps).map(|step| match self.entry(step) {
            None => PlanRow {
                step,
                action: "compute".into(),
                resolved_strategy: "none".into(),
                b_value: None,
            },
            Some(e) => PlanRow {
                step,
                action: format!("skip:{}", e.requested.as_str()),
                resolved_strategy: e.resolved.as_str().into(),
                b_value: e.b_value,
            },
        });
        write_rows(None, rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut steps = 0;
        let mut entries = Vec::new();
        for row in read_rows::<PlanRow>(text, PLAN_HEADER)? {
            if row.step != steps + 1 {
                return Err(Error::Parse(format!(
                    "plan rows out of order at step {}",
                    row.step
                )));
            }
            steps = row.step;
            if row.action == "compute" {
                continue;
            }
            let requested = row
                .action
                .strip_prefix("skip:")
                .ok_or_else(|| {
                    Error::Parse(format!("bad action `{}` at step {}", row.action, row.step))
                })?
                .parse()?;
            entries.push(PlanEntry {
                step: row.step,
                requested,
                resolved: row.resolved_strategy.parse()?,
                b_value: row.b_value,
            });
        }
        Ok(Self { steps, entries })
    }
}

#[derive(Serialize, Deserialize)]
struct PlanRow {
    step: usize,
    action: String,
    resolved_strategy: String,
    #[serde(rename = "B_value")]
    b_value: Option<f64>,
}
