//! Experiment orchestration: configuration, profile → plan → run, sweeps,
//! deviation reports and the files they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{AppliedStrategy, CacheEngine, CacheSchedule, GcConfig, QueueMode, Strategy};
use crate::dit::{init_model, ConditionInfo, Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::flops::{flops_from_log, FlopTotals};
use crate::numerics::{l1_total, Tensor};
use crate::policy::{GodConfig, GodPolicy, PositionSense, StrategyPlan};
use crate::sampler::{sample, SamplerConfig};
use crate::scripted::{exact_cache_errors, Family, ScriptSpec, ScriptedModel};
use crate::stats::{build_stats, StatsTable};
use crate::table::write_rows;

pub const RUNS_SCHEMA: &str = "gradcache-runs/1";
pub const SWEEP_SCHEMA: &str = "gradcache-sweep/1";
pub const REPORT_SCHEMA: &str = "gradcache-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Toy(ModelConfig),
    Scripted(ScriptSpec),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Toy(ModelConfig::default())
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            ModelSpec::Toy(cfg) => Box::new(init_model(cfg)?) as Box<dyn Denoiser>,
            ModelSpec::Scripted(spec) => Box::new(ScriptedModel::new(spec.clone())?),
        })
    }

    /// Conditioning for prompt `prompt` with latent seed `seed`.
    pub fn condition(&self, prompt: u64, seed: u64) -> ConditionInfo {
        match self {
            ModelSpec::Toy(cfg) => ConditionInfo::for_prompt(cfg, prompt, seed),
            ModelSpec::Scripted(_) => ConditionInfo::class(0, seed),
        }
    }
}

/// Cache strategy as chosen on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    None,
    Normal,
    #[default]
    Gc,
    Goc,
}

impl StrategyChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyChoice::None => "none",
            StrategyChoice::Normal => "normal",
            StrategyChoice::Gc => "gc",
            StrategyChoice::Goc => "goc",
        }
    }

    fn skip_strategy(self) -> Option<Strategy> {
        match self {
            StrategyChoice::None => None,
            StrategyChoice::Normal => Some(Strategy::Normal),
            StrategyChoice::Gc => Some(Strategy::Gc),
            StrategyChoice::Goc => Some(Strategy::GocDecided),
        }
    }
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "normal" => Ok(Self::Normal),
            "gc" => Ok(Self::Gc),
            "goc" => Ok(Self::Goc),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected none, normal, gc or goc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSettings {
    /// Percentage of steps skipped: 0, 25 or 50.
    pub level: u32,
    pub strategy: StrategyChoice,
    pub eta: f64,
    pub shadow: bool,
    pub reuse_limit: usize,
    pub gap_normalize: bool,
    pub queue_mode: QueueMode,
}

impl Default for CacheSettings {
    fn default() -> Self {
        let gc = GcConfig::default();
        Self {
            level: 50,
            strategy: StrategyChoice::Gc,
            eta: gc.eta,
            shadow: false,
            reuse_limit: gc.reuse_limit,
            gap_normalize: gc.gap_normalize,
            queue_mode: gc.queue_mode,
        }
    }
}

impl CacheSettings {
    pub fn gc_config(&self) -> GcConfig {
        GcConfig {
            eta: self.eta,
            reuse_limit: self.reuse_limit,
            gap_normalize: self.gap_normalize,
            queue_mode: self.queue_mode,
        }
    }

    pub fn schedule(&self, steps: usize) -> Result<CacheSchedule> {
        match self.strategy.skip_strategy() {
            None => Ok(CacheSchedule::all_compute(steps)),
            Some(s) => CacheSchedule::for_level(self.level, steps, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GodSettings {
    pub gamma: f64,
    pub threshold: f64,
    pub position_sense: PositionSense,
    /// Feed `N̂` (true) or the raw count (false) to the score.
    pub normalize_n: bool,
    pub stats_path: Option<PathBuf>,
}

impl Default for GodSettings {
    fn default() -> Self {
        let g = GodConfig::default();
        Self {
            gamma: g.gamma,
            threshold: g.threshold,
            position_sense: g.position_sense,
            normalize_n: true,
            stats_path: None,
        }
    }
}

impl GodSettings {
    pub fn god_config(&self) -> GodConfig {
        GodConfig {
            gamma: self.gamma,
            threshold: self.threshold,
            position_sense: self.position_sense,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSettings {
    /// Number of prompts averaged per step.
    pub prompts: usize,
    pub seed: u64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            prompts: 8,
            seed: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub sampler: SamplerConfig,
    pub cache: CacheSettings,
    pub god: GodSettings,
    pub profile: ProfileSettings,
    pub output: OutputSettings,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            sampler: SamplerConfig::default(),
            cache: CacheSettings::default(),
            god: GodSettings::default(),
            profile: ProfileSettings::default(),
            output: OutputSettings::default(),
            runs: 1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.sampler.timesteps()?;
        self.cache.gc_config().validate()?;
        self.cache
            .schedule(self.sampler.step_count)?
            .validate(self.cache.reuse_limit)?;
        self.god.god_config().validate()?;
        if self.profile.prompts == 0 {
            return Err(Error::Config("profile.prompts must be at least 1".into()));
        }
        match &self.model {
            ModelSpec::Toy(m) => m.validate(),
            ModelSpec::Scripted(s) => s.validate(),
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

/// sha256 over the little-endian bit patterns of every element.
pub fn checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update((t.rows() as u64).to_le_bytes());
    h.update((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// One sampling step of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub timestep: usize,
    pub action: &'static str,
    pub applied: AppliedStrategy,
    pub b_value: Option<f64>,
    pub reuse_error: Option<f64>,
    pub normal_error: Option<f64>,
    pub gc_error: Option<f64>,
    /// Per-block reuse error actually incurred (shadow mode only).
    pub block_errors: Vec<f64>,
    /// `J(x_t − x_t^ref)` against the uncached trajectory.
    pub deviation: f64,
    pub step_flops: u64,
    pub cumulative_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub strategy: StrategyChoice,
    pub level: u32,
    pub eta: f64,
    pub steps: Vec<StepRow>,
    pub checksum: String,
    pub reference_checksum: String,
    pub final_deviation: f64,
    /// Sum of shadow-measured reuse errors; zero without shadow mode.
    pub total_reuse_error: f64,
    pub flops: FlopTotals,
    pub sublayer_speedup: f64,
    pub total_speedup: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub latents: Vec<Tensor>,
}

/// Loads or rejects the statistics a policy-gated run needs.
pub fn load_policy(cfg: &ExperimentConfig) -> Result<GodPolicy> {
    let path = cfg.god.stats_path.as_ref().ok_or_else(|| {
        Error::Config("strategy goc needs inverse-gradient stats: run `gradcache profile` and set god.stats_path".into())
    })?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "stats file {} not found: run `gradcache profile` first",
            path.display()
        )));
    }
    let mut stats = StatsTable::load(path)?;
    stats.normalize_n = cfg.god.normalize_n;
    GodPolicy::new(cfg.god.god_config(), stats)
}

/// Profiles the configured model over `profile.prompts` prompts.
pub fn profile_stats(cfg: &ExperimentConfig) -> Result<StatsTable> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let prompts: Vec<ConditionInfo> = (0..cfg.profile.prompts as u64)
        .map(|k| {
            cfg.model
                .condition(cfg.profile.seed + k, cfg.profile.seed + k)
        })
        .collect();
    let mut stats = build_stats(model.as_ref(), &cfg.sampler, &prompts, cfg.cache.eta)?;
    stats.normalize_n = cfg.god.normalize_n;
    Ok(stats)
}

/// The schedule and resolved plan for the configured strategy and level.
/// Only `goc` consults a policy; it is loaded from `god.stats_path` when
/// `policy` is `None`.
pub fn build_plan(
    cfg: &ExperimentConfig,
    policy: Option<&GodPolicy>,
) -> Result<(CacheSchedule, StrategyPlan)> {
    let schedule = cfg.cache.schedule(cfg.sampler.step_count)?;
    let plan = match (cfg.cache.strategy, policy) {
        (StrategyChoice::Goc, Some(p)) => p.build_plan(&schedule)?,
        (StrategyChoice::Goc, None) => load_policy(cfg)?.build_plan(&schedule)?,
        _ => StrategyPlan::fixed(&schedule)?,
    };
    Ok((schedule, plan))
}

/// Runs `cfg.runs` seeded samples, each against its own uncached reference.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    policy: Option<&GodPolicy>,
) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let owned;
    let policy = match (cfg.cache.strategy, policy) {
        (StrategyChoice::Goc, None) => {
            owned = load_policy(cfg)?;
            Some(&owned)
        }
        (StrategyChoice::Goc, p) => p,
        _ => None,
    };
    let model = cfg.model.build()?;
    (0..cfg.runs)
        .into_par_iter()
        .map(|run| run_one(cfg, model.as_ref(), policy, run))
        .collect()
}

fn run_one(
    cfg: &ExperimentConfig,
    model: &dyn Denoiser,
    policy: Option<&GodPolicy>,
    run: usize,
) -> Result<RunReport> {
    let start = Instant::now();
    let seed = cfg.run_seed(run);
    let cond = cfg.model.condition(seed, seed);
    let sched = cfg.sampler.schedule()?;
    let steps = cfg.sampler.step_count;

    let mut reference_engine = CacheEngine::all_compute(steps);
    let reference = sample(model, &cond, &sched, &cfg.sampler, &mut reference_engine)?;

    let schedule = cfg.cache.schedule(steps)?;
    let mut engine =
        CacheEngine::new(schedule, cfg.cache.gc_config(), policy)?.with_shadow(cfg.cache.shadow);
    let traj = sample(model, &cond, &sched, &cfg.sampler, &mut engine)?;

    let flops = flops_from_log(&model.flop_model(), &traj.steps);
    let mut cumulative = 0;
    let mut rows = Vec::with_capacity(steps);
    for (i, log) in traj.steps.iter().enumerate() {
        let step_flops = flops.per_step[i].total();
        cumulative += step_flops;
        let measured = !log.block_errors.is_empty();
        rows.push(StepRow {
            step: log.step,
            timestep: traj.timesteps[i],
            action: if log.action.is_skip() {
                "skip"
            } else {
                "compute"
            },
            applied: log.applied,
            b_value: log.b_value,
            reuse_error: measured.then(|| log.reuse_error()),
            normal_error: measured.then(|| log.normal_error()),
            gc_error: if measured { log.gc_error() } else { None },
            block_errors: log.block_errors.iter().map(|b| b.used).collect(),
            deviation: l1_total(&traj.latents[i + 1].sub(&reference.latents[i + 1])?),
            step_flops,
            cumulative_flops: cumulative,
        });
    }
    let total_reuse_error = rows.iter().filter_map(|r| r.reuse_error).sum();
    Ok(RunReport {
        run,
        seed,
        strategy: cfg.cache.strategy,
        level: cfg.cache.level,
        eta: cfg.cache.eta,
        checksum: checksum(traj.final_latent()),
        reference_checksum: checksum(reference.final_latent()),
        final_deviation: rows.last().map_or(0.0, |r| r.deviation),
        total_reuse_error,
        sublayer_speedup: flops.sublayer_speedup(),
        total_speedup: flops.total_speedup(),
        flops,
        steps: rows,
        wall_seconds: start.elapsed().as_secs_f64(),
        latents: traj.latents,
    })
}

#[derive(Serialize)]
struct RunRow<'a> {
    run: usize,
    seed: u64,
    strategy: &'a str,
    level: u32,
    eta: f64,
    step: usize,
    timestep: usize,
    action: &'a str,
    applied: &'a str,
    b_value: Option<f64>,
    reuse_error: Option<f64>,
    normal_error: Option<f64>,
    gc_error: Option<f64>,
    deviation: f64,
    step_flops: u64,
    cumulative_flops: u64,
}

/// Per-step rows for every run, preceded by a schema line.
pub fn runs_csv(reports: &[RunReport]) -> Result<String> {
    let rows = reports.iter().flat_map(|r| {
        r.steps.iter().map(move |s| RunRow {
            run: r.run,
            seed: r.seed,
            strategy: r.strategy.as_str(),
            level: r.level,
            eta: r.eta,
            step: s.step,
            timestep: s.timestep,
            action: s.action,
            applied: s.applied.as_str(),
            b_value: s.b_value,
            reuse_error: s.reuse_error,
            normal_error: s.normal_error,
            gc_error: s.gc_error,
            deviation: s.deviation,
            step_flops: s.step_flops,
            cumulative_flops: s.cumulative_flops,
        })
    });
    write_rows(Some(&format!("schema={RUNS_SCHEMA}")), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub checksum: String,
    pub reference_checksum: String,
    pub final_deviation: f64,
    pub total_reuse_error: f64,
    pub sublayer_flops: u64,
    pub gc_overhead_flops: u64,
    pub total_flops: u64,
    pub baseline_total_flops: u64,
    pub sublayer_speedup: f64,
    pub total_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema: &'static str,
    pub strategy: StrategyChoice,
    pub level: u32,
    pub eta: f64,
    pub runs: Vec<RunSummary>,
    pub mean_final_deviation: f64,
    pub mean_total_reuse_error: f64,
}

pub fn summarize(reports: &[RunReport]) -> Summary {
    let n = reports.len().max(1) as f64;
    let first = reports.first();
    Summary {
        schema: RUNS_SCHEMA,
        strategy: first.map_or(StrategyChoice::None, |r| r.strategy),
        level: first.map_or(0, |r| r.level),
        eta: first.map_or(0.0, |r| r.eta),
        runs: reports
            .iter()
            .map(|r| RunSummary {
                run: r.run,
                seed: r.seed,
                checksum: r.checksum.clone(),
                reference_checksum: r.reference_checksum.clone(),
                final_deviation: r.final_deviation,
                total_reuse_error: r.total_reuse_error,
                sublayer_flops: r.flops.sublayer(),
                gc_overhead_flops: r.flops.gc_overhead(),
                total_flops: r.flops.total(),
                baseline_total_flops: r.flops.baseline_total(),
                sublayer_speedup: r.sublayer_speedup,
                total_speedup: r.total_speedup,
            })
            .collect(),
        mean_final_deviation: reports.iter().map(|r| r.final_deviation).sum::<f64>() / n,
        mean_total_reuse_error: reports.iter().map(|r| r.total_reuse_error).sum::<f64>() / n,
    }
}

/// Timing and other non-reproducible facts, kept apart from the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub started_unix_seconds: u64,
    pub wall_seconds: Vec<f64>,
    pub version: &'static str,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved.json"), cfg.to_json()? + "\n")?;
    Ok(())
}

/// Writes `runs.csv`, `summary.json`, `meta.json`, the schedule and (for
/// policy-gated runs) `plan.csv`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    reports: &[RunReport],
    plan: Option<&StrategyPlan>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_resolved_config(dir, cfg)?;
    fs::write(dir.join("runs.csv"), runs_csv(reports)?)?;
    write_json(&dir.join("summary.json"), &summarize(reports))?;
    fs::write(
        dir.join("schedule.csv"),
        cfg.cache.schedule(cfg.sampler.step_count)?.to_text()?,
    )?;
    if let Some(p) = plan {
        fs::write(dir.join("plan.csv"), p.to_csv()?)?;
    }
    write_json(
        &dir.join("meta.json"),
        &RunMeta {
            started_unix_seconds: unix_now(),
            wall_seconds: reports.iter().map(|r| r.wall_seconds).collect(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Gamma,
    Threshold,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Gamma => "gamma",
            SweepParam::Threshold => "threshold",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepParam::Eta => cfg.cache.eta = v,
            SweepParam::Gamma => cfg.god.gamma = v,
            SweepParam::Threshold => cfg.god.threshold = v,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "eta" => Ok(Self::Eta),
            "gamma" => Ok(Self::Gamma),
            "threshold" | "Gamma" => Ok(Self::Threshold),
            other => Err(Error::Config(format!(
                "cannot sweep `{other}` (expected eta, gamma or threshold)"
            ))),
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub mean_reuse_error: f64,
    pub std_reuse_error: f64,
    pub mean_deviation: f64,
    pub std_deviation: f64,
    pub total_flops: u64,
    pub sublayer_speedup: f64,
    /// Final-deviation of every run, in run order.
    #[serde(skip)]
    pub deviations: Vec<f64>,
}

/// Runs the experiment once per value on the same seeds, with shadow
/// measurement forced on.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    policy: Option<&GodPolicy>,
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::Config("a sweep needs at least two values".into()));
    }
    let owned;
    let policy = match (cfg.cache.strategy, policy) {
        (StrategyChoice::Goc, None) => {
            owned = load_policy(cfg)?;
            Some(owned.stats().clone())
        }
        (_, p) => p.map(|p| p.stats().clone()),
    };
    values
        .par_iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.apply(&mut c, v);
            c.cache.shadow = true;
            let p = match &policy {
                Some(stats) => Some(GodPolicy::new(c.god.god_config(), stats.clone())?),
                None => None,
            };
            let reports = run_experiment(&c, p.as_ref())?;
            let errs: Vec<f64> = reports.iter().map(|r| r.total_reuse_error).collect();
            let devs: Vec<f64> = reports.iter().map(|r| r.final_deviation).collect();
            let (mean_reuse_error, std_reuse_error) = mean_std(&errs);
            let (mean_deviation, std_deviation) = mean_std(&devs);
            let first = &reports[0];
            Ok(SweepRow {
                param,
                value: v,
                mean_reuse_error,
                std_reuse_error,
                mean_deviation,
                std_deviation,
                total_flops: first.flops.total(),
                sublayer_speedup: first.sublayer_speedup,
                deviations: devs,
            })
        })
        .collect::<Result<Vec<_>>>()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        param: &'a str,
        value: f64,
        mean_reuse_error: f64,
        std_reuse_error: f64,
        mean_deviation: f64,
        std_deviation: f64,
        total_flops: u64,
        sublayer_speedup: f64,
    }
    let rows = rows.iter().map(|r| Row {
        param: r.param.as_str(),
        value: r.value,
        mean_reuse_error: r.mean_reuse_error,
        std_reuse_error: r.std_reuse_error,
        mean_deviation: r.mean_deviation,
        std_deviation: r.std_deviation,
        total_flops: r.total_flops,
        sublayer_speedup: r.sublayer_speedup,
    });
    write_rows(Some(&format!("schema={SWEEP_SCHEMA}")), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub step: usize,
    pub deviation: f64,
    pub cumulative_deviation: f64,
    pub reuse_error: f64,
    pub cumulative_reuse_error: f64,
    pub block_errors: Vec<f64>,
}

/// Per-step deviation of `run` from `reference`, which must share its seed
/// and step count.
pub fn error_report(run: &RunReport, reference: &RunReport) -> Result<Vec<DeviationRow>> {
    if run.seed != reference.seed || run.latents.len() != reference.latents.len() {
        return Err(Error::Comparison(format!(
            "run (seed {}, {} latents) and reference (seed {}, {} latents) are not comparable",
            run.seed,
            run.latents.len(),
            reference.seed,
            reference.latents.len()
        )));
    }
    let (mut cum_dev, mut cum_err) = (0.0, 0.0);
    run.steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = &run.latents[i + 1];
            let b = &reference.latents[i + 1];
            if a.shape() != b.shape() {
                return Err(Error::Comparison(format!(
                    "latent shapes differ at step {}",
                    s.step
                )));
            }
            let deviation = l1_total(&a.sub(b)?);
            let reuse_error = s.reuse_error.unwrap_or(0.0);
            cum_dev += deviation;
            cum_err += reuse_error;
            Ok(DeviationRow {
                step: s.step,
                deviation,
                cumulative_deviation: cum_dev,
                reuse_error,
                cumulative_reuse_error: cum_err,
                block_errors: s.block_errors.clone(),
            })
        })
        .collect()
}

/// Deviation rows of several runs, keyed by run index.
pub fn report_csv(reports: &[(usize, Vec<DeviationRow>)]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        run: usize,
        step: usize,
        deviation: f64,
        cumulative_deviation: f64,
        reuse_error: f64,
        cumulative_reuse_error: f64,
        /// Per-block errors joined with `;`.
        block_errors: String,
    }
    let rows = reports.iter().flat_map(|(run, rows)| {
        rows.iter().map(move |r| Row {
            run: *run,
            step: r.step,
            deviation: r.deviation,
            cumulative_deviation: r.cumulative_deviation,
            reuse_error: r.reuse_error,
            cumulative_reuse_error: r.cumulative_reuse_error,
            block_errors: r
                .block_errors
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        })
    });
    write_rows(Some(&format!("schema={REPORT_SCHEMA}")), rows)
}

/// Outcome of one built-in self-check against closed-form errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub max_abs_diff: f64,
}

/// Runs every scripted family through the engine with shadow measurement
/// and compares the measured reuse errors to the closed form.
pub fn oracle_check(steps: usize, eta: f64) -> Result<Vec<OracleCheck>> {
    let families = [
        Family::Const { a: 1.7 },
        Family::Affine { a: 0.5, b: -1.3 },
        Family::Quadratic {
            a: 0.2,
            b: 0.9,
            c: -0.15,
        },
        Family::Sine {
            amplitude: 1.1,
            period: 7.0,
            phase: 0.4,
        },
        Family::Alternating { a: 0.8 },
    ];
    let settings = SamplerConfig {
        step_count: steps,
        ..SamplerConfig::default()
    };
    let noise = settings.schedule()?;
    let mut out = Vec::new();
    for family in families {
        for (label, schedule) in [
            (
                "alternating",
                CacheSchedule::alternating(steps, Strategy::Gc),
            ),
            (
                "every_third",
                CacheSchedule::every_nth(steps, 3, Strategy::Gc)?,
            ),
        ] {
            for mode in [QueueMode::Computed, QueueMode::Effective] {
                let spec = ScriptSpec::uniform(3, family, true, (4, 6), 11);
                let model = ScriptedModel::new(spec.clone())?;
                let gc = GcConfig {
                    eta,
                    queue_mode: mode,
                    ..GcConfig::default()
                };
                let mut engine = CacheEngine::new(schedule.clone(), gc, None)?.with_shadow(true);
                let traj = sample(
                    &model,
                    &ConditionInfo::class(0, 1),
                    &noise,
                    &settings,
                    &mut engine,
                )?;
                let exact = exact_cache_errors(&spec, &schedule, &gc, None)?;
                let mut max_abs_diff: f64 = 0.0;
                let skips = traj.steps.iter().filter(|s| s.action.is_skip());
                for (log, want) in skips.zip(&exact) {
                    for (got, w) in log.block_errors.iter().zip(&want.blocks) {
                        max_abs_diff = max_abs_diff
                            .max((got.used - w.used).abs())
                            .max((got.normal - w.normal).abs());
                    }
                }
                out.push(OracleCheck {
                    name: format!("{}/{label}/{mode:?}", family.name()),
                    passed: max_abs_diff <= 1e-9,
                    max_abs_diff,
                });
            }
        }
    }
    Ok(out)
}
