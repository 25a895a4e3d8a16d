use gradcache::cache::AppliedStrategy;
use gradcache::scripted::{exact_cache_errors, random_spec, BlockScript};
use gradcache::stats::{average_features, count_inverse, profile};
use gradcache::{
    sample, CacheEngine, CacheSchedule, ConditionInfo, Denoiser, Family, GcConfig, QueueMode,
    SamplerConfig, ScriptSpec, ScriptedModel, Strategy,
};

fn families() -> Vec<Family> {
    vec![
        Family::Const { a: -2.5 },
        Family::Affine { a: 1.0, b: 0.35 },
        Family::Quadratic {
            a: -1.0,
            b: 0.4,
            c: 0.07,
        },
        Family::Sine {
            amplitude: 2.0,
            period: 5.5,
            phase: 1.0,
        },
        Family::Alternating { a: 1.25 },
    ]
}

#[test]
fn engine_shadow_errors_match_closed_form() {
    let settings = SamplerConfig::default();
    let noise = settings.schedule().unwrap();
    for family in families() {
        for schedule in [
            CacheSchedule::alternating(20, Strategy::Gc),
            CacheSchedule::alternating(20, Strategy::Normal),
            CacheSchedule::every_nth(20, 3, Strategy::Gc).unwrap(),
            CacheSchedule::first_half_even(20, Strategy::Gc),
        ] {
            for mode in [QueueMode::Computed, QueueMode::Effective] {
                for gap_normalize in [true, false] {
                    let cfg = GcConfig {
                        eta: 0.9,
                        gap_normalize,
                        queue_mode: mode,
                        ..GcConfig::default()
                    };
                    let spec = ScriptSpec::uniform(3, family, true, (3, 5), 21);
                    let model = ScriptedModel::new(spec.clone()).unwrap();
                    let mut engine = CacheEngine::new(schedule.clone(), cfg, None)
                        .unwrap()
                        .with_shadow(true);
                    let traj = sample(
                        &model,
                        &ConditionInfo::class(0, 9),
                        &noise,
                        &settings,
                        &mut engine,
                    )
                    .unwrap();
                    let exact = exact_cache_errors(&spec, &schedule, &cfg, None).unwrap();
                    let logs: Vec<_> = traj.steps.iter().filter(|s| s.action.is_skip()).collect();
                    assert_eq!(logs.len(), exact.len());
                    for (log, want) in logs.iter().zip(&exact) {
                        assert_eq!(log.applied, want.applied);
                        for (got, w) in log.block_errors.iter().zip(&want.blocks) {
                            assert!(
                                (got.used - w.used).abs() < 1e-9,
                                "{} step {}",
                                family.name(),
                                log.step
                            );
                            assert!((got.normal - w.normal).abs() < 1e-9);
                            match (got.gc, w.gc) {
                                (Some(g), Some(e)) => assert!((g - e).abs() < 1e-9),
                                (None, None) => {}
                                other => panic!("gc availability differs: {other:?}"),
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn shadow_mode_does_not_change_the_trajectory() {
    let spec = random_spec(3, 3, true, (4, 4));
    let model = ScriptedModel::new(spec).unwrap();
    let settings = SamplerConfig::default();
    let noise = settings.schedule().unwrap();
    let run = |shadow| {
        let mut e = CacheEngine::new(
            CacheSchedule::alternating(20, Strategy::Gc),
            GcConfig::default(),
            None,
        )
        .unwrap()
        .with_shadow(shadow);
        sample(
            &model,
            &ConditionInfo::class(0, 4),
            &noise,
            &settings,
            &mut e,
        )
        .unwrap()
        .latents
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn quadratic_gc_error_is_the_second_difference() {
    let (b, c) = (0.8, -0.3);
    let spec = ScriptSpec::uniform(2, Family::Quadratic { a: 0.1, b, c }, false, (3, 3), 8);
    let schedule = CacheSchedule::every_nth(20, 3, Strategy::Gc).unwrap();
    let errs = exact_cache_errors(&spec, &schedule, &GcConfig::with_eta(1.0), None).unwrap();
    for e in &errs {
        assert_eq!(e.applied, AppliedStrategy::Gc);
        for (l, blk) in e.blocks.iter().enumerate() {
            let norm = gradcache::l1_total(&spec.pattern(l));
            // Two sublayers per block.
            assert!((blk.gc.unwrap() - 2.0 * (2.0 * c).abs() * norm).abs() < 1e-9);
        }
    }
}

#[test]
fn alternating_extrapolation_never_beats_plain_reuse() {
    let spec = ScriptSpec::uniform(2, Family::Alternating { a: -0.6 }, true, (2, 2), 3);
    for schedule in [
        CacheSchedule::every_nth(20, 3, Strategy::Gc).unwrap(),
        CacheSchedule::alternating(20, Strategy::Gc),
    ] {
        for e in exact_cache_errors(&spec, &schedule, &GcConfig::with_eta(1.0), None).unwrap() {
            if let Some(gc) = e.gc() {
                assert!(gc >= e.normal() - 1e-12, "step {}", e.step);
            }
        }
    }
}

#[test]
fn profiled_labels_match_family_ground_truth() {
    let settings = SamplerConfig::default();
    let alt = Family::Alternating { a: 1.5 };
    let aff = Family::Affine { a: 0.2, b: -0.9 };
    let spec = ScriptSpec {
        rows: 3,
        cols: 4,
        seed: 2,
        blocks: vec![
            BlockScript::uniform(alt, true),
            BlockScript::uniform(aff, true),
            BlockScript::uniform(alt, true),
            BlockScript::uniform(aff, true),
        ],
    };
    let model = ScriptedModel::new(spec).unwrap();
    let prompts: Vec<_> = (0..3).map(|k| ConditionInfo::class(0, k)).collect();
    let log = profile(&model, &settings, &prompts).unwrap();
    assert_eq!(log.entry_count(), 3 * 20 * model.sublayer_ids().len());
    let avg = average_features(&log).unwrap();
    for step in 3..=20 {
        for block in 0..4 {
            let inverse = gradcache::stats::block_is_inverse(&avg, block, step, 1.2).unwrap();
            assert_eq!(inverse, block % 2 == 0, "block {block} step {step}");
        }
    }
    let table = count_inverse(&avg, 1.2, 4, 3).unwrap();
    assert_eq!(&table.n[..2], &[0, 0]);
    assert!(table.n[2..].iter().all(|&n| n == 2));
    assert!(table.n_hat.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn profiling_is_order_invariant_and_single_prompt_is_exact() {
    let settings = SamplerConfig {
        step_count: 8,
        ..SamplerConfig::default()
    };
    let cfg = gradcache::ModelConfig {
        depth: 2,
        tokens: 6,
        channels: 16,
        ..gradcache::ModelConfig::default()
    };
    let model = gradcache::init_model(&cfg).unwrap();
    let prompts: Vec<_> = (0..4)
        .map(|k| ConditionInfo::for_prompt(&cfg, k, 40 + k))
        .collect();
    let forward = average_features(&profile(&model, &settings, &prompts).unwrap()).unwrap();
    let mut reversed_prompts = prompts.clone();
    reversed_prompts.reverse();
    reversed_prompts.swap(0, 2);
    let reversed =
        average_features(&profile(&model, &settings, &reversed_prompts).unwrap()).unwrap();
    assert_eq!(forward, reversed);
    assert_eq!(
        count_inverse(&forward, 1.2, 2, 4).unwrap(),
        count_inverse(&reversed, 1.2, 2, 4).unwrap()
    );

    let single = profile(&model, &settings, &prompts[1..2]).unwrap();
    let mut engine = CacheEngine::all_compute(8).with_feature_recording(true);
    sample(
        &model,
        &prompts[1],
        &settings.schedule().unwrap(),
        &settings,
        &mut engine,
    )
    .unwrap();
    assert_eq!(single.runs[0], engine.take_features());
    let avg = average_features(&single).unwrap();
    for id in model.sublayer_ids() {
        assert_eq!(avg.get(4, id), single.get(0, 4, id));
    }

    assert!(matches!(
        profile(&model, &settings, &[]),
        Err(gradcache::Error::EmptyInput(_))
    ));
}
