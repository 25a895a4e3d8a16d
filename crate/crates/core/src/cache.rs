//! Feature cache: per-sublayer store, gradient queue, normal reuse and
//! gradient-extrapolated reuse, and the interceptor that applies a
//! [`CacheSchedule`] during sampling.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dit::{Interceptor, SublayerId, SublayerKind};
use crate::error::{Error, Result};
use crate::numerics::{l1_total, Tensor};
use crate::policy::{GodPolicy, StrategyPlan};
use crate::table::{read_rows, write_rows};

/// How a skipped step obtains its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Reuse the cached feature unchanged.
    Normal,
    /// Extrapolate from the two queued features.
    Gc,
    /// Let the gradient-optimization policy pick `Normal` or `Gc` per step.
    GocDecided,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Normal => "normal",
            Strategy::Gc => "gc",
            Strategy::GocDecided => "goc",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal" => Ok(Strategy::Normal),
            "gc" => Ok(Strategy::Gc),
            "goc" | "goc_decided" => Ok(Strategy::GocDecided),
            other => Err(Error::Parse(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Compute,
    Skip(Strategy),
}

impl Action {
    pub fn is_skip(self) -> bool {
        matches!(self, Action::Skip(_))
    }
}

/// What a step actually did after policy resolution and cold-cache fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedStrategy {
    Compute,
    Normal,
    Gc,
}

impl AppliedStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            AppliedStrategy::Compute => "compute",
            AppliedStrategy::Normal => "normal",
            AppliedStrategy::Gc => "gc",
        }
    }
}

impl fmt::Display for AppliedStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-step compute/skip mask, indexed by 1-based generation-order step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSchedule {
    actions: Vec<Action>,
}

pub const SCHEDULE_HEADER: &str = "step,action,strategy";

impl CacheSchedule {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions }
    }

    pub fn all_compute(steps: usize) -> Self {
        Self::new(vec![Action::Compute; steps])
    }

    /// Skips exactly the listed steps.
    pub fn from_skip_steps(steps: usize, skips: &[usize], strategy: Strategy) -> Result<Self> {
        let mut actions = vec![Action::Compute; steps];
        for &s in skips {
            if s == 0 || s > steps {
                return Err(Error::Config(format!("skip step {s} outside 1..={steps}")));
            }
            actions[s - 1] = Action::Skip(strategy);
        }
        Ok(Self::new(actions))
    }

    /// Computes odd steps and skips even ones (50% caching).
    pub fn alternating(steps: usize, strategy: Strategy) -> Self {
        let skips: Vec<usize> = (2..=steps).step_by(2).collect();
        Self::from_skip_steps(steps, &skips, strategy).expect("even steps are in range")
    }

    /// Skips the even steps in the first half of the run (25% caching).
    pub fn first_half_even(steps: usize, strategy: Strategy) -> Self {
        let skips: Vec<usize> = (2..=steps / 2).step_by(2).collect();
        Self::from_skip_steps(steps, &skips, strategy).expect("even steps are in range")
    }

    /// Skips every `period`-th step, so each skip is preceded by
    /// `period − 1` computed steps.
    pub fn every_nth(steps: usize, period: usize, strategy: Strategy) -> Result<Self> {
        if period < 2 {
            return Err(Error::Config(format!(
                "skip period must be at least 2, got {period}"
            )));
        }
        let skips: Vec<usize> = (period..=steps).step_by(period).collect();
        Self::from_skip_steps(steps, &skips, strategy)
    }

    /// The schedule for a caching level in percent (0, 25 or 50).
    pub fn for_level(level: u32, steps: usize, strategy: Strategy) -> Result<Self> {
        match level {
            0 => Ok(Self::all_compute(steps)),
            25 => Ok(Self::first_half_even(steps, strategy)),
            50 => Ok(Self::alternating(steps, strategy)),
            other => Err(Error::Config(format!("unsupported caching level {other}%"))),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, step: usize) -> Option<Action> {
        step.checked_sub(1)
            .and_then(|i| self.actions.get(i))
            .copied()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn skip_steps(&self) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_skip())
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn skip_fraction(&self) -> f64 {
        self.skip_steps().len() as f64 / self.len().max(1) as f64
    }

    pub fn has_goc(&self) -> bool {
        self.actions.contains(&Action::Skip(Strategy::GocDecided))
    }

    /// Same mask with every skip assigned `strategy`.
    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        Self::new(
            self.actions
                .iter()
                .map(|a| {
                    if a.is_skip() {
                        Action::Skip(strategy)
                    } else {
                        Action::Compute
                    }
                })
                .collect(),
        )
    }

    /// Step 1 must compute and no run of skips may exceed `reuse_limit`.
    pub fn validate(&self, reuse_limit: usize) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Config("empty cache schedule".into()));
        }
        if self.actions[0] != Action::Compute {
            return Err(Error::Config("step 1 must be a compute step".into()));
        }
        let mut run = 0;
        for (i, a) in self.actions.iter().enumerate() {
            if a.is_skip() {
                run += 1;
                if run > reuse_limit {
                    return Err(Error::Config(format!(
                        "step {} would reuse a cache more than {reuse_limit} time(s)",
                        i + 1
                    )));
                }
            } else {
                run = 0;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let rows = self.actions.iter().enumerate().map(|(i, a)| {
            let (action, strategy) = match a {
                Action::Compute => ("compute", "none"),
                Action::Skip(s) => ("skip", s.as_str()),
            };
            ScheduleRow {
                step: i + 1,
                action: action.into(),
                strategy: strategy.into(),
            }
        });
        write_rows(None, rows)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut actions = Vec::new();
        for row in read_rows::<ScheduleRow>(text, SCHEDULE_HEADER)? {
            let bad = |msg: &str| Error::Parse(format!("schedule step {}: {msg}", row.step));
            if row.step != actions.len() + 1 {
                return Err(bad("steps must be consecutive from 1"));
            }
            let action = match row.action.as_str() {
                "compute" => Action::Compute,
                "skip" => Action::Skip(row.strategy.parse()?),
                _ => return Err(bad("unknown action")),
            };
            actions.push(action);
        }
        Ok(Self::new(actions))
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleRow {
    step: usize,
    action: String,
    strategy: String,
}

/// Which features enter the gradient queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    /// Only freshly computed features; skipped steps leave the queue alone.
    #[default]
    Computed,
    /// Every step's effective feature (computed, copied or extrapolated).
    Effective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcConfig {
    pub eta: f64,
    pub reuse_limit: usize,
    /// Divide the queued difference by its step gap and scale by the
    /// distance to the target step.
    pub gap_normalize: bool,
    pub queue_mode: QueueMode,
}

impl Default for GcConfig {
    fn default() -> Self {
        Self {
            eta: 1.2,
            reuse_limit: 1,
            gap_normalize: true,
            queue_mode: QueueMode::Computed,
        }
    }
}

impl GcConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "eta must be a finite non-negative number, got {}",
                self.eta
            )));
        }
        if self.reuse_limit == 0 {
            return Err(Error::Config("reuse_limit must be at least 1".into()));
        }
        Ok(())
    }
}

/// `g_curr + η·(g_curr − g_prev)`.
pub fn gc_extrapolate(g_prev: &Tensor, g_curr: &Tensor, eta: f64) -> Result<Tensor> {
    if g_prev.shape() != g_curr.shape() {
        return Err(Error::ShapeMismatch {
            op: "gc_extrapolate",
            lhs: g_prev.shape(),
            rhs: g_curr.shape(),
        });
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!(
            "eta must be finite and non-negative, got {eta}"
        )));
    }
    if eta == 0.0 {
        return Ok(g_curr.clone());
    }
    let data = g_curr
        .data()
        .iter()
        .zip(g_prev.data())
        .map(|(&c, &p)| c + eta * (c - p))
        .collect();
    Tensor::from_vec(g_curr.rows(), g_curr.cols(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub step: usize,
    pub value: Tensor,
    pub computed: bool,
}

#[derive(Debug, Clone, Default)]
struct SlotState {
    queue: VecDeque<QueueEntry>,
    /// Reuses since the last computation.
    reuses: usize,
}

const QUEUE_CAPACITY: usize = 2;

/// `U[l]` and the two-entry gradient queue for every sublayer.
#[derive(Debug, Clone, Default)]
pub struct CacheStore {
    mode: QueueMode,
    shape: Option<(usize, usize)>,
    slots: BTreeMap<SublayerId, SlotState>,
}

impl CacheStore {
    pub fn new(mode: QueueMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> QueueMode {
        self.mode
    }

    /// The most recent cached feature, `U[id]`.
    pub fn current(&self, id: SublayerId) -> Option<&Tensor> {
        self.slots
            .get(&id)
            .and_then(|s| s.queue.back())
            .map(|e| &e.value)
    }

    pub fn queue(&self, id: SublayerId) -> Vec<&QueueEntry> {
        self.slots
            .get(&id)
            .map(|s| s.queue.iter().collect())
            .unwrap_or_default()
    }

    pub fn history_len(&self, id: SublayerId) -> usize {
        self.slots.get(&id).map_or(0, |s| s.queue.len())
    }

    fn newest_step(&self, id: SublayerId) -> Option<usize> {
        self.slots
            .get(&id)
            .and_then(|s| s.queue.back())
            .map(|e| e.step)
    }

    fn check_order(&self, id: SublayerId, step: usize) -> Result<()> {
        match self.newest_step(id) {
            Some(last) if step <= last => Err(Error::Ordering(format!(
                "{id}: step {step} does not follow cached step {last}"
            ))),
            _ => Ok(()),
        }
    }

    fn push(&mut self, id: SublayerId, entry: QueueEntry) {
        let slot = self.slots.entry(id).or_default();
        slot.queue.push_back(entry);
        while slot.queue.len() > QUEUE_CAPACITY {
            slot.queue.pop_front();
        }
    }

    pub fn record_compute(&mut self, id: SublayerId, step: usize, value: Tensor) -> Result<()> {
        match self.shape {
            Some(shape) if shape != value.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "record_compute",
                    lhs: shape,
                    rhs: value.shape(),
                })
            }
            None => self.shape = Some(value.shape()),
            _ => {}
        }
        self.check_order(id, step)?;
        self.push(
            id,
            QueueEntry {
                step,
                value,
                computed: true,
            },
        );
        self.slots.get_mut(&id).expect("just pushed").reuses = 0;
        Ok(())
    }

    fn check_reuse(&self, id: SublayerId, step: usize, cfg: &GcConfig) -> Result<()> {
        let slot = self
            .slots
            .get(&id)
            .filter(|s| !s.queue.is_empty())
            .ok_or(Error::ColdCache(id, step))?;
        if slot.reuses >= cfg.reuse_limit {
            return Err(Error::ReuseLimit {
                id,
                step,
                limit: cfg.reuse_limit,
            });
        }
        self.check_order(id, step)
    }

    fn commit_reuse(&mut self, id: SublayerId, step: usize, value: &Tensor) {
        if self.mode == QueueMode::Effective {
            self.push(
                id,
                QueueEntry {
                    step,
                    value: value.clone(),
                    computed: false,
                },
            );
        }
        self.slots.get_mut(&id).expect("checked").reuses += 1;
    }

    /// Zero-order hold: the cached feature, unchanged.
    pub fn reuse_normal(&mut self, id: SublayerId, step: usize, cfg: &GcConfig) -> Result<Tensor> {
        self.check_reuse(id, step, cfg)?;
        let value = self.current(id).expect("checked").clone();
        self.commit_reuse(id, step, &value);
        Ok(value)
    }

    /// The extrapolated feature for `step` without touching the store.
    pub fn peek_gc(&self, id: SublayerId, step: usize, cfg: &GcConfig) -> Result<Tensor> {
        let q = self.queue(id);
        if q.len() < 2 {
            return Err(Error::InsufficientHistory(id, step));
        }
        let (older, newer) = (q[0], q[1]);
        let factor = if cfg.gap_normalize {
            let ahead = step.saturating_sub(newer.step) as f64;
            cfg.eta * ahead / (newer.step - older.step) as f64
        } else {
            cfg.eta
        };
        gc_extrapolate(&older.value, &newer.value, factor)
    }

    /// First-order extrapolation from the two queued features.
    pub fn reuse_gc(&mut self, id: SublayerId, step: usize, cfg: &GcConfig) -> Result<Tensor> {
        self.check_reuse(id, step, cfg)?;
        let value = self.peek_gc(id, step, cfg)?;
        self.commit_reuse(id, step, &value);
        Ok(value)
    }
}

/// Shadow-measured reuse errors for one block at one step, summed over the
/// block's sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockError {
    /// `J(used − exact)`.
    pub used: f64,
    /// `J(cached − exact)`: what normal reuse would have cost.
    pub normal: f64,
    /// `J(extrapolated − exact)`, when the queue allowed extrapolation.
    pub gc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub action: Action,
    pub applied: AppliedStrategy,
    /// Policy score when the step's strategy was decided by the policy.
    pub b_value: Option<f64>,
    /// Sublayer kinds evaluated on the critical path.
    pub computed: Vec<SublayerKind>,
    pub normal_reuses: usize,
    pub gc_reuses: usize,
    /// Per-block reuse errors; filled only in shadow mode on skip steps.
    pub block_errors: Vec<BlockError>,
}

impl StepLog {
    fn new(step: usize, action: Action, b_value: Option<f64>) -> Self {
        Self {
            step,
            action,
            applied: AppliedStrategy::Compute,
            b_value,
            computed: Vec::new(),
            normal_reuses: 0,
            gc_reuses: 0,
            block_errors: Vec::new(),
        }
    }

    pub fn reuse_error(&self) -> f64 {
        self.block_errors.iter().map(|b| b.used).sum()
    }

    pub fn normal_error(&self) -> f64 {
        self.block_errors.iter().map(|b| b.normal).sum()
    }

    pub fn gc_error(&self) -> Option<f64> {
        self.block_errors.iter().map(|b| b.gc).sum()
    }
}

/// Expected per-step strategies for a schedule, resolving policy decisions
/// and the cold-queue fallback without running anything.
pub fn resolve_applied(
    schedule: &CacheSchedule,
    plan: Option<&StrategyPlan>,
    cfg: &GcConfig,
) -> Result<Vec<AppliedStrategy>> {
    let mut computed_so_far = 0;
    let mut out = Vec::with_capacity(schedule.len());
    for (i, &a) in schedule.actions().iter().enumerate() {
        let step = i + 1;
        let history = match cfg.queue_mode {
            QueueMode::Computed => computed_so_far,
            QueueMode::Effective => step - 1,
        };
        let applied = match a {
            Action::Compute => {
                computed_so_far += 1;
                AppliedStrategy::Compute
            }
            Action::Skip(s) => match resolve_strategy(s, step, plan)? {
                Strategy::Gc if history >= 2 => AppliedStrategy::Gc,
                _ => AppliedStrategy::Normal,
            },
        };
        out.push(applied);
    }
    Ok(out)
}

fn resolve_strategy(s: Strategy, step: usize, plan: Option<&StrategyPlan>) -> Result<Strategy> {
    match s {
        Strategy::GocDecided => plan
            .ok_or_else(|| Error::Config("GOC-decided step without a policy".into()))?
            .resolved(step)
            .ok_or_else(|| Error::IncompleteStats(format!("plan has no decision for step {step}"))),
        other => Ok(other),
    }
}

/// The cache as seen by the model: applies the schedule step by step.
#[derive(Debug, Clone)]
pub struct CacheEngine {
    store: CacheStore,
    schedule: CacheSchedule,
    cfg: GcConfig,
    plan: Option<StrategyPlan>,
    shadow: bool,
    record_features: bool,
    log: Vec<StepLog>,
    features: Vec<BTreeMap<SublayerId, Tensor>>,
}

/// Builds the interceptor for one sampling run.
pub fn make_interceptor(
    store: CacheStore,
    schedule: CacheSchedule,
    cfg: GcConfig,
    policy: Option<&GodPolicy>,
) -> Result<CacheEngine> {
    cfg.validate()?;
    schedule.validate(cfg.reuse_limit)?;
    let plan = match policy {
        Some(p) => Some(p.build_plan(&schedule)?),
        None if schedule.has_goc() => {
            return Err(Error::Config(
                "schedule has policy-decided steps but no policy was supplied".into(),
            ))
        }
        None => None,
    };
    Ok(CacheEngine {
        store,
        schedule,
        cfg,
        plan,
        shadow: false,
        record_features: false,
        log: Vec::new(),
        features: Vec::new(),
    })
}

impl CacheEngine {
    /// An engine that computes every step.
    pub fn all_compute(steps: usize) -> Self {
        make_interceptor(
            CacheStore::default(),
            CacheSchedule::all_compute(steps),
            GcConfig::default(),
            None,
        )
        .expect("all-compute schedule is valid")
    }

    pub fn new(schedule: CacheSchedule, cfg: GcConfig, policy: Option<&GodPolicy>) -> Result<Self> {
        make_interceptor(CacheStore::new(cfg.queue_mode), schedule, cfg, policy)
    }

    /// Also evaluate skipped sublayers, off the critical path, to measure
    /// reuse error.
    pub fn with_shadow(mut self, on: bool) -> Self {
        self.shadow = on;
        self
    }

    /// Keep every step's effective raw features.
    pub fn with_feature_recording(mut self, on: bool) -> Self {
        self.record_features = on;
        self
    }

    pub fn schedule(&self) -> &CacheSchedule {
        &self.schedule
    }

    pub fn plan(&self) -> Option<&StrategyPlan> {
        self.plan.as_ref()
    }

    pub fn config(&self) -> &GcConfig {
        &self.cfg
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn into_log(self) -> Vec<StepLog> {
        self.log
    }

    /// Effective features per visited step (empty unless recording).
    pub fn features(&self) -> &[BTreeMap<SublayerId, Tensor>] {
        &self.features
    }

    pub fn take_features(&mut self) -> Vec<BTreeMap<SublayerId, Tensor>> {
        std::mem::take(&mut self.features)
    }

    fn step_log(&mut self, step: usize) -> Result<&mut StepLog> {
        let action = self.schedule.action(step).ok_or_else(|| {
            Error::Config(format!(
                "step {step} outside the {}-step cache schedule",
                self.schedule.len()
            ))
        })?;
        if self.log.last().map(|s| s.step) != Some(step) {
            if let Some(last) = self.log.last() {
                if step < last.step {
                    return Err(Error::Ordering(format!(
                        "step {step} after step {}",
                        last.step
                    )));
                }
            }
            let b_value = match action {
                Action::Skip(Strategy::GocDecided) => {
                    self.plan.as_ref().and_then(|p| p.b_value(step))
                }
                _ => None,
            };
            self.log.push(StepLog::new(step, action, b_value));
            if self.record_features {
                self.features.push(BTreeMap::new());
            }
        }
        Ok(self.log.last_mut().expect("pushed"))
    }
}

impl Interceptor for CacheEngine {
    fn sublayer(
        &mut self,
        id: SublayerId,
        step: usize,
        compute: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<Tensor> {
        let action = self.step_log(step)?.action;
        let value = match action {
            Action::Compute => {
                let v = compute()?;
                self.store.record_compute(id, step, v.clone())?;
                let log = self.log.last_mut().expect("step logged");
                log.computed.push(id.kind);
                v
            }
            Action::Skip(strategy) => {
                let resolved = resolve_strategy(strategy, step, self.plan.as_ref())?;
                let exact = if self.shadow { Some(compute()?) } else { None };
                let cached = self.store.current(id).cloned();
                let gc_candidate = if exact.is_some() {
                    self.store.peek_gc(id, step, &self.cfg).ok()
                } else {
                    None
                };
                let use_gc = resolved == Strategy::Gc && self.store.history_len(id) >= 2;
                let v = if use_gc {
                    self.store.reuse_gc(id, step, &self.cfg)?
                } else {
                    self.store.reuse_normal(id, step, &self.cfg)?
                };
                let log = self.log.last_mut().expect("step logged");
                if use_gc {
                    log.gc_reuses += 1;
                    log.applied = AppliedStrategy::Gc;
                } else {
                    log.normal_reuses += 1;
                    if log.gc_reuses == 0 {
                        log.applied = AppliedStrategy::Normal;
                    }
                }
                if let Some(exact) = exact {
                    if log.block_errors.len() <= id.block {
                        log.block_errors.resize(id.block + 1, BlockError::default());
                    }
                    let b = &mut log.block_errors[id.block];
                    b.used += l1_total(&v.sub(&exact)?);
                    b.normal += l1_total(&cached.expect("reuse succeeded").sub(&exact)?);
                    if let Some(g) = gc_candidate {
                        b.gc = Some(b.gc.unwrap_or(0.0) + l1_total(&g.sub(&exact)?));
                    }
                }
                v
            }
        };
        if self.record_features {
            if let Some(map) = self.features.last_mut() {
                map.insert(id, value.clone());
            }
        }
        Ok(value)
    }
}
