use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradcache::harness::{
    build_plan, error_report, load_policy, oracle_check, profile_stats, report_csv, run_experiment,
    sweep, sweep_csv, write_resolved_config, write_run_outputs, ExperimentConfig, StrategyChoice,
    SweepParam,
};
use gradcache::{Error, Result};

/// Exit status when a self-check fails.
const CHECK_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gradcache",
    version,
    about = "Feature-caching experiments on a toy diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Profile uncached sampling and write inverse-gradient stats.
    Profile,
    /// Resolve the policy plan for the configured caching level.
    Plan,
    /// Run cached sampling and write per-step results.
    Run,
    /// Repeat `run` over several values of one parameter.
    Sweep {
        #[arg(long, value_enum, default_value_t = Param::Eta)]
        param: Param,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Per-step deviation of a cached run from the uncached reference.
    Report,
    /// Compare engine-measured reuse errors with closed-form scripted values.
    OracleCheck,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Param {
    Eta,
    Gamma,
    Threshold,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StrategyArg {
    None,
    Normal,
    Gc,
    Goc,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, value_enum, global = true)]
    strategy: Option<StrategyArg>,
    #[arg(long = "cache-level", global = true, value_parser = ["0", "25", "50"])]
    cache_level: Option<String>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Recompute skipped sublayers off the critical path to measure reuse error.
    #[arg(long, global = true)]
    shadow: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.runs {
            cfg.runs = v;
        }
        if let Some(s) = self.strategy {
            cfg.cache.strategy = match s {
                StrategyArg::None => StrategyChoice::None,
                StrategyArg::Normal => StrategyChoice::Normal,
                StrategyArg::Gc => StrategyChoice::Gc,
                StrategyArg::Goc => StrategyChoice::Goc,
            };
        }
        if let Some(level) = &self.cache_level {
            cfg.cache.level = level
                .parse()
                .map_err(|_| Error::Config(format!("bad cache level {level}")))?;
        }
        if let Some(v) = self.eta {
            cfg.cache.eta = v;
        }
        if let Some(v) = self.gamma {
            cfg.god.gamma = v;
        }
        if let Some(v) = self.threshold {
            cfg.god.threshold = v;
        }
        if self.shadow {
            cfg.cache.shadow = true;
        }
        if let Some(dir) = &self.out {
            cfg.output.dir = dir.clone();
        }
        if cfg.god.stats_path.is_none() {
            let local = cfg.output.dir.join("stats.json");
            if local.exists() {
                cfg.god.stats_path = Some(local);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; 2 is reserved for non-finite values.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let cfg = cli.overrides.resolve()?;
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Profile => {
            let stats = profile_stats(&cfg)?;
            let path = out.join("stats.json");
            stats.save(&path)?;
            write_resolved_config(&out, &cfg)?;
            println!("inverse-gradient counts per step: {:?}", stats.n);
            println!("wrote {}", path.display());
        }
        Command::Plan => {
            let (schedule, plan) = build_plan(&cfg, None)?;
            fs::write(out.join("schedule.csv"), schedule.to_text()?)?;
            fs::write(out.join("plan.csv"), plan.to_csv()?)?;
            write_resolved_config(&out, &cfg)?;
            let gc = plan
                .entries
                .iter()
                .filter(|e| e.resolved == gradcache::Strategy::Gc)
                .count();
            println!(
                "{gc} of {} skip steps use extrapolation",
                plan.entries.len()
            );
            println!("wrote {}", out.join("plan.csv").display());
        }
        Command::Run => {
            let policy = match cfg.cache.strategy {
                StrategyChoice::Goc => Some(load_policy(&cfg)?),
                _ => None,
            };
            let (_, plan) = build_plan(&cfg, policy.as_ref())?;
            let reports = run_experiment(&cfg, policy.as_ref())?;
            write_run_outputs(&out, &cfg, &reports, Some(&plan))?;
            for r in &reports {
                println!(
                    "run {} seed {} deviation {:.6} speedup {:.4} checksum {}",
                    r.run, r.seed, r.final_deviation, r.sublayer_speedup, r.checksum
                );
            }
            println!("wrote {}", out.join("runs.csv").display());
        }
        Command::Sweep { param, values } => {
            let param = match param {
                Param::Eta => SweepParam::Eta,
                Param::Gamma => SweepParam::Gamma,
                Param::Threshold => SweepParam::Threshold,
            };
            let rows = sweep(&cfg, param, values, None)?;
            fs::write(out.join("sweep.csv"), sweep_csv(&rows)?)?;
            write_resolved_config(&out, &cfg)?;
            for r in &rows {
                println!(
                    "{}={} mean deviation {:.6} mean reuse error {:.6}",
                    param.as_str(),
                    r.value,
                    r.mean_deviation,
                    r.mean_reuse_error
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Report => {
            let mut shadowed = cfg.clone();
            shadowed.cache.shadow = true;
            let runs = run_experiment(&shadowed, None)?;
            let mut reference_cfg = cfg.clone();
            reference_cfg.cache.strategy = StrategyChoice::None;
            let references = run_experiment(&reference_cfg, None)?;
            let tables = runs
                .iter()
                .zip(&references)
                .map(|(r, reference)| Ok((r.run, error_report(r, reference)?)))
                .collect::<Result<Vec<_>>>()?;
            fs::write(out.join("report.csv"), report_csv(&tables)?)?;
            write_resolved_config(&out, &shadowed)?;
            println!("wrote {}", out.join("report.csv").display());
        }
        Command::OracleCheck => {
            let checks = oracle_check(cfg.sampler.step_count, cfg.cache.eta)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {} (max diff {:.3e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_abs_diff
                );
                failed += usize::from(!c.passed);
            }
            write_resolved_config(&out, &cfg)?;
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", checks.len());
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
