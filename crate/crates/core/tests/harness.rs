use gradcache::harness::{
    error_report, profile_stats, run_experiment, runs_csv, summarize, sweep, write_run_outputs,
    ExperimentConfig, ModelSpec, StrategyChoice, SweepParam, RUNS_SCHEMA,
};
use gradcache::scripted::exact_cache_errors;
use gradcache::{CacheSchedule, Family, GcConfig, ModelConfig, ScriptSpec, StatsTable, Strategy};

fn small_toy(strategy: StrategyChoice) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelSpec::Toy(ModelConfig {
            depth: 2,
            tokens: 8,
            channels: 16,
            ..ModelConfig::default()
        }),
        runs: 3,
        seed: 11,
        ..ExperimentConfig::default()
    };
    cfg.cache.strategy = strategy;
    cfg.profile.prompts = 2;
    cfg
}

fn scripted(family: Family, strategy: StrategyChoice, eta: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelSpec::Scripted(ScriptSpec::uniform(3, family, true, (4, 6), 5)),
        runs: 2,
        ..ExperimentConfig::default()
    };
    cfg.cache.strategy = strategy;
    cfg.cache.eta = eta;
    cfg.cache.shadow = true;
    cfg
}

#[test]
fn runs_are_deterministic_and_csv_is_byte_identical() {
    for strategy in [
        StrategyChoice::None,
        StrategyChoice::Normal,
        StrategyChoice::Gc,
    ] {
        let cfg = small_toy(strategy);
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(runs_csv(&a).unwrap(), runs_csv(&b).unwrap());
        assert!(runs_csv(&a)
            .unwrap()
            .starts_with(&format!("# schema={RUNS_SCHEMA}\n")));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.checksum, y.checksum);
        }
    }
}

#[test]
fn uncached_runs_match_their_reference() {
    for r in run_experiment(&small_toy(StrategyChoice::None), None).unwrap() {
        assert_eq!(r.checksum, r.reference_checksum);
        assert_eq!(r.final_deviation, 0.0);
        assert_eq!(r.flops.sublayer(), r.flops.baseline_sublayer);
    }
}

#[test]
fn zero_eta_extrapolation_reproduces_plain_reuse() {
    let mut gc = small_toy(StrategyChoice::Gc);
    gc.cache.eta = 0.0;
    let mut normal = small_toy(StrategyChoice::Normal);
    normal.cache.eta = 0.0;
    let a = run_experiment(&gc, None).unwrap();
    let b = run_experiment(&normal, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.checksum, y.checksum);
    }
}

#[test]
fn flops_are_additive_and_caching_never_costs_more() {
    let none = run_experiment(&small_toy(StrategyChoice::None), None).unwrap();
    for strategy in [StrategyChoice::Normal, StrategyChoice::Gc] {
        for r in run_experiment(&small_toy(strategy), None).unwrap() {
            let per_step: u64 = r.steps.iter().map(|s| s.step_flops).sum();
            assert_eq!(per_step, r.flops.total());
            assert_eq!(r.steps.last().unwrap().cumulative_flops, r.flops.total());
            assert!(r.flops.total() <= none[0].flops.total());
        }
    }
}

#[test]
fn affine_extrapolation_is_exact_after_the_cold_start() {
    let gc = run_experiment(
        &scripted(Family::Affine { a: 0.5, b: 0.2 }, StrategyChoice::Gc, 1.0),
        None,
    )
    .unwrap();
    let normal = run_experiment(
        &scripted(
            Family::Affine { a: 0.5, b: 0.2 },
            StrategyChoice::Normal,
            1.0,
        ),
        None,
    )
    .unwrap();
    for (g, n) in gc.iter().zip(&normal) {
        for (gs, ns) in g
            .steps
            .iter()
            .zip(&n.steps)
            .filter(|(s, _)| s.action == "skip" && s.step > 2)
        {
            assert!(gs.reuse_error.unwrap() < 1e-12, "step {}", gs.step);
            assert!(ns.reuse_error.unwrap() > 0.1);
        }
    }
}

#[test]
fn summary_matches_reports() {
    let reports = run_experiment(&small_toy(StrategyChoice::Gc), None).unwrap();
    let s = summarize(&reports);
    assert_eq!(s.runs.len(), 3);
    let mean = reports.iter().map(|r| r.final_deviation).sum::<f64>() / 3.0;
    assert!((s.mean_final_deviation - mean).abs() < 1e-12);
}

#[test]
fn output_files_are_written_and_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(StrategyChoice::Gc);
    let reports = run_experiment(&cfg, None).unwrap();
    write_run_outputs(dir.path(), &cfg, &reports, None).unwrap();
    for f in [
        "runs.csv",
        "summary.json",
        "schedule.csv",
        "meta.json",
        "config.resolved.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = ExperimentConfig::load(&dir.path().join("config.resolved.json")).unwrap();
    assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
    assert!(!std::fs::read_to_string(dir.path().join("runs.csv"))
        .unwrap()
        .contains("unix"));

    let mut bad = cfg.to_json().unwrap();
    bad = bad.replacen("\"runs\"", "\"runz\"", 1);
    assert_eq!(
        ExperimentConfig::from_json(&bad).unwrap_err().exit_code(),
        1
    );
}

#[test]
fn stats_file_round_trips_and_policy_runs_use_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_toy(StrategyChoice::Goc);
    let stats = profile_stats(&cfg).unwrap();
    let path = dir.path().join("stats.json");
    stats.save(&path).unwrap();
    assert_eq!(StatsTable::load(&path).unwrap(), stats);

    assert_eq!(run_experiment(&cfg, None).unwrap_err().exit_code(), 1);
    cfg.god.stats_path = Some(path);
    let reports = run_experiment(&cfg, None).unwrap();
    assert!(reports[0]
        .steps
        .iter()
        .filter(|s| s.action == "skip")
        .all(|s| s.b_value.is_some()));
}

#[test]
fn sweep_rows_follow_values_and_repeat_exactly() {
    let cfg = small_toy(StrategyChoice::Gc);
    let rows = sweep(&cfg, SweepParam::Eta, &[0.4, 0.4, 1.0], None).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].deviations, rows[1].deviations);
    assert!(rows.iter().all(|r| r.total_flops == rows[0].total_flops));
    assert!(sweep(&cfg, SweepParam::Eta, &[1.0], None).is_err());
}

#[test]
fn quadratic_sweep_minimum_matches_closed_form() {
    let family = Family::Quadratic {
        a: 0.0,
        b: 1.0,
        c: 0.15,
    };
    let cfg = scripted(family, StrategyChoice::Gc, 1.0);
    let etas: Vec<f64> = (0..=8).map(|k| 0.25 * k as f64).collect();
    let rows = sweep(&cfg, SweepParam::Eta, &etas, None).unwrap();
    let ModelSpec::Scripted(spec) = &cfg.model else {
        unreachable!()
    };
    let schedule = CacheSchedule::alternating(20, Strategy::Gc);
    let exact: Vec<f64> = etas
        .iter()
        .map(|&eta| {
            let gc = GcConfig {
                eta,
                ..cfg.cache.gc_config()
            };
            exact_cache_errors(spec, &schedule, &gc, None)
                .unwrap()
                .iter()
                .map(|e| e.used())
                .sum()
        })
        .collect();
    for (r, e) in rows.iter().zip(&exact) {
        assert!((r.mean_reuse_error - e).abs() < 1e-9 * (1.0 + e));
    }
    let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let measured: Vec<f64> = rows.iter().map(|r| r.mean_reuse_error).collect();
    assert_eq!(argmin(&measured), argmin(&exact));
}

#[test]
fn error_report_is_reflexive_and_checks_compatibility() {
    let gc = run_experiment(&small_toy(StrategyChoice::Gc), None).unwrap();
    let none = run_experiment(&small_toy(StrategyChoice::None), None).unwrap();
    assert!(error_report(&none[0], &none[0])
        .unwrap()
        .iter()
        .all(|r| r.deviation == 0.0));
    let rows = error_report(&gc[0], &none[0]).unwrap();
    assert_eq!(rows[0].deviation, 0.0);
    assert!(rows[1..].iter().all(|r| r.deviation > 0.0));
    assert!(error_report(&gc[0], &none[1]).is_err());
}
