use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotnorm::cli::run_cli;
use slotnorm::dataset::{make_split, split_seed};
use slotnorm::harness::eval::score_segmentation;
use slotnorm::harness::report::{failed_runs, read_results_csv, write_results_csv};
use slotnorm::harness::*;
use slotnorm::optim::{default_peak_lr, LrSchedule};
use slotnorm::Error;

fn tiny(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        train_objects: 2,
        train_slots: 3,
        eval_slots: vec![2, 3, 4],
        eval_max_objects: 3,
        eval_scenes: 6,
        val_scenes: 3,
        seeds: vec![0],
        warmup_steps: 2,
        half_life: 4,
        batch_size: 2,
        steps: 4,
        train_iters: 2,
        eval_iters: 3,
        log_every: 1,
        resolution: 8,
        encoder_channels: 4,
        encoder_layers: 1,
        decoder_channels: 4,
        broadcast: 4,
        dim: 6,
        slot_mlp_hidden: 8,
        min_objects: 1,
        max_objects: 3,
        min_size: 3,
        max_size: 4,
        ..ExperimentConfig::default()
    }
}

fn record(
    variant: Variant,
    seed: u64,
    eval_slots: usize,
    objects: ObjectCount,
    f_ari: f64,
) -> SweepResult {
    SweepResult {
        variant,
        seed,
        train_objects: 4,
        train_slots: 5,
        eval_slots,
        eval_objects: objects,
        f_ari,
        ari: f_ari / 2.0,
        l2: 0.01 * eval_slots as f64,
        n_scenes: 10,
    }
}

#[test]
fn schedule_joints_are_exact() {
    let s = LrSchedule {
        peak: default_peak_lr(),
        warmup: 1_000,
        half_life: 5_000,
    };
    assert_eq!(s.at(1_000), s.peak);
    assert_eq!(s.at(6_000), s.peak / 2.0);
    assert_eq!(s.at(0), 0.0);
    assert!(s.at(999) < s.peak && s.at(1_001) < s.peak);
    assert_eq!(default_peak_lr(), 4.0 * 0.5f64.powf(0.1) * 1e-4);
}

#[test]
fn config_defaults_overrides_and_rejections() {
    let base = ExperimentConfig::default();
    base.validate().unwrap();
    assert_eq!(
        (
            base.steps,
            base.warmup_steps,
            base.half_life,
            base.batch_size
        ),
        (20_000, 1_000, 5_000, 16)
    );
    assert_eq!(base.eval_scenes, 512);
    let text = serde_json::to_string(&base).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), base);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), base);

    let c = base
        .with_overrides(&[
            "variant=batch",
            "eval_slots=[3,4]",
            "batch_size=8",
            "out_dir=elsewhere",
        ])
        .unwrap();
    assert_eq!(c.variant, Variant::Batch);
    assert_eq!(c.eval_slots, vec![3, 4]);
    assert_eq!(c.batch_size, 8);
    assert_eq!(c.out_dir, Path::new("elsewhere"));
    assert_eq!(c.run_name(7), "batch_O4_K5_seed7");

    for bad in [
        r#"{"bogus": 1}"#,
        r#"{"seeds": []}"#,
        r#"{"eval_slots": [5, 0]}"#,
        r#"{"eval_slots": []}"#,
        r#"{"variant": "sinkhorn"}"#,
        r#"{"train_objects": 9}"#,
        r#"{"resolution": 24}"#,
    ] {
        assert!(
            matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))),
            "{bad}"
        );
    }
    assert!(base.with_overrides(&["nope=1"]).is_err());
    assert!(base.with_overrides(&["steps"]).is_err());
}

#[test]
fn median_matches_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=9 {
        for _ in 0..50 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            // An element is a middle element when at most n/2 values lie
            // strictly on either side of it.
            let middles: Vec<f64> = v
                .iter()
                .copied()
                .filter(|&x| {
                    let below = v.iter().filter(|&&y| y < x).count();
                    let above = v.iter().filter(|&&y| y > x).count();
                    2 * below <= n && 2 * above <= n
                })
                .collect();
            let expected = if n % 2 == 1 {
                middles[0]
            } else {
                let lo = middles.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = middles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo + hi) / 2.0
            };
            assert_eq!(median(&v), Some(expected), "{v:?}");
        }
    }
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
}

#[test]
fn csv_round_trip_and_column_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let results: Vec<SweepResult> = (0..40)
        .map(|i| {
            let objects = if i % 3 == 0 {
                ObjectCount::All
            } else {
                ObjectCount::Exactly(i % 7)
            };
            let mut r = record(
                Variant::ALL[i % 4],
                i as u64,
                5 + i % 4,
                objects,
                rng.random(),
            );
            r.ari = rng.random::<f64>() - 0.5;
            r.l2 = rng.random::<f64>() * 1e-3;
            r
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_results_csv(&path, &results).unwrap();
    assert_eq!(read_results_csv(&path).unwrap(), results);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "variant,seed,O,K,eval_slots,eval_objects,f_ari,ari,l2,n_scenes"
    );
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("baseline,0,4,5,5,all,"));
}

#[test]
fn single_record_report() {
    let dir = tempfile::tempdir().unwrap();
    let results = vec![record(Variant::Layer, 0, 5, ObjectCount::All, 0.8)];
    let files = emit_report(&results, dir.path(), 0.5).unwrap();
    assert_eq!(read_results_csv(&files.csv).unwrap(), results);
    assert_eq!(
        std::fs::read_to_string(&files.csv).unwrap().lines().count(),
        2
    );
    let svg = std::fs::read_to_string(dir.path().join("f_ari_vs_slots.svg")).unwrap();
    assert!(svg.contains(r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1""#));
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches("<circle").count(), 1);
    assert!(svg.contains("layer (4,5)"));
    assert!(files.failed_runs.is_empty());
    assert!(matches!(
        emit_report(&[], dir.path(), 0.5),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn report_into_unwritable_location_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let results = vec![record(Variant::Layer, 0, 5, ObjectCount::All, 0.8)];
    assert!(matches!(
        emit_report(&results, &file.join("sub"), 0.5),
        Err(Error::Io { .. })
    ));
}

#[test]
fn failed_runs_stay_in_csv_but_leave_plots() {
    let mut results = Vec::new();
    for seed in 0..3 {
        // Seed 2 never becomes object-centric.
        let f = if seed == 2 {
            0.1
        } else {
            0.8 + 0.05 * seed as f64
        };
        for k in [5, 7] {
            results.push(record(Variant::Baseline, seed, k, ObjectCount::All, f));
            results.push(record(
                Variant::Baseline,
                seed,
                k,
                ObjectCount::Exactly(3),
                f,
            ));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&results, dir.path(), 0.5).unwrap();
    assert_eq!(files.failed_runs.len(), 1);
    assert_eq!(files.failed_runs[0].seed, 2);
    assert_eq!(read_results_csv(&files.csv).unwrap().len(), results.len());
    let failed = std::fs::read_to_string(&files.failed).unwrap();
    assert_eq!(failed.lines().count(), 2);
    assert!(failed
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("baseline,2,4,5,0.1"));

    // Plots are exactly those of the retained seeds alone.
    let kept: Vec<SweepResult> = results.iter().filter(|r| r.seed != 2).cloned().collect();
    let other = tempfile::tempdir().unwrap();
    emit_report(&kept, other.path(), 0.5).unwrap();
    for plot in &files.plots {
        let name = plot.file_name().unwrap();
        assert_eq!(
            std::fs::read(plot).unwrap(),
            std::fs::read(other.path().join(name)).unwrap()
        );
    }
    assert_eq!(failed_runs(&results, 0.05).len(), 0);
    assert!(files
        .plots
        .iter()
        .any(|p| p.ends_with("f_ari_vs_objects_k5.svg")));
}

#[test]
fn trend_check_on_synthetic_sweeps() {
    let mut results = Vec::new();
    let curves = [
        (Variant::Baseline, [0.90, 0.55]),
        (Variant::WeightedSum, [0.88, 0.80]),
        (Variant::Batch, [0.89, 0.78]),
    ];
    for (v, [lo, hi]) in curves {
        for seed in 0..3 {
            let jitter = 0.01 * seed as f64;
            results.push(record(v, seed, 5, ObjectCount::All, lo + jitter));
            results.push(record(v, seed, 11, ObjectCount::All, hi - jitter));
        }
    }
    let t = trend_check(&results, 0.5, 5, 11).unwrap();
    assert!(t.passed());
    assert!((t.drop(Variant::Baseline) - (0.91 - 0.54)).abs() < 1e-12);

    let flipped: Vec<SweepResult> = results
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.variant == Variant::Baseline && r.eval_slots == 11 {
                r.f_ari = 0.85;
            }
            r
        })
        .collect();
    let t = trend_check(&flipped, 0.5, 5, 11).unwrap();
    assert!(!t.baseline_drops_more && !t.scaled_variants_hold_up);
    assert!(trend_check(&results[..6], 0.5, 5, 11).is_err());
}

#[test]
fn oracle_masks_score_perfectly() {
    let spec = tiny(Variant::Baseline).scene_spec();
    for s in make_split(&spec, 20, 3, split_seed(0, "test")).unwrap() {
        let pred: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
        assert_eq!(score_segmentation(&pred, &s.labels).unwrap(), (1.0, 1.0));
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    for variant in Variant::ALL {
        let config = tiny(variant);
        let (a, log_a) = train(&config, 3).unwrap();
        let (b, log_b) = train(&config, 3).unwrap();
        assert_eq!(a.store, b.store, "{variant}");
        assert_eq!(a.stats, b.stats);
        let bits = |l: &TrainingLog| {
            l.entries
                .iter()
                .map(|e| e.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&log_a), bits(&log_b));
        assert_eq!(log_a.entries.len(), config.steps);
        assert!(log_a.entries.iter().all(|e| e.loss.is_finite()));
        assert_eq!(log_a.val_f_ari.to_bits(), log_b.val_f_ari.to_bits());
        let (c, _) = train(&config, 4).unwrap();
        assert_ne!(a.store, c.store);
        if variant == Variant::Batch {
            let s = a.stats.as_ref().unwrap();
            assert!(s.ema_m.is_some() && s.ema_v.unwrap() > 0.0);
        } else {
            assert!(a.stats.is_none());
        }
    }
}

#[test]
fn sweep_grid_is_complete_and_survives_checkpointing() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::WeightedSum, Variant::Batch] {
        let config = tiny(variant);
        let (trained, log) = train(&config, 1).unwrap();
        let files = save_run(dir.path(), &trained, &log).unwrap();
        let results = evaluate_sweep(&trained, &config).unwrap();

        let cells: BTreeSet<(usize, ObjectCount)> = results
            .iter()
            .map(|r| (r.eval_slots, r.eval_objects))
            .collect();
        assert_eq!(cells.len(), results.len());
        let counts: BTreeSet<ObjectCount> = results
            .iter()
            .map(|r| r.eval_objects)
            .filter(|o| *o != ObjectCount::All)
            .collect();
        assert_eq!(cells.len(), 3 * (counts.len() + 1));
        for k in [2, 3, 4] {
            let pooled = results
                .iter()
                .find(|r| r.eval_slots == k && r.eval_objects == ObjectCount::All)
                .unwrap();
            assert_eq!(pooled.n_scenes, 6);
            let split: usize = results
                .iter()
                .filter(|r| r.eval_slots == k && r.eval_objects != ObjectCount::All)
                .map(|r| r.n_scenes)
                .sum();
            assert_eq!(split, 6);
            assert!((-1.0..=1.0).contains(&pooled.f_ari) && pooled.l2 >= 0.0);
        }

        let loaded = TrainedModel::load(&files.checkpoint).unwrap();
        assert_eq!(loaded.store, trained.store);
        assert_eq!(loaded.inference_stats(), trained.inference_stats());
        assert_eq!(evaluate_sweep(&loaded, &config).unwrap(), results);

        let saved_log: TrainingLog =
            serde_json::from_str(&std::fs::read_to_string(&files.log).unwrap()).unwrap();
        assert_eq!(saved_log, log);

        let other = ExperimentConfig {
            variant: Variant::Baseline,
            ..config.clone()
        };
        assert!(matches!(
            evaluate_sweep(&loaded, &other),
            Err(Error::Contract { .. })
        ));
        let pooled_only = ExperimentConfig {
            eval_by_object_count: false,
            eval_slots: vec![5],
            ..config
        };
        let r = evaluate_sweep(&loaded, &pooled_only).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].eval_slots, r[0].eval_objects), (5, ObjectCount::All));
    }
}

#[test]
fn divergence_reports_last_finite_step() {
    let config = ExperimentConfig {
        peak_lr: 1e200,
        warmup_steps: 0,
        steps: 6,
        ..tiny(Variant::Baseline)
    };
    match train(&config, 0) {
        Err(Error::Diverged {
            step,
            last_finite_step,
            last_finite_loss,
        }) => {
            assert!(step >= 1);
            assert_eq!(last_finite_step, step - 1);
            assert!(last_finite_loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("slotnorm").chain(args.iter().copied()))
}

#[test]
fn cli_usage_errors_exit_nonzero() {
    assert_ne!(cli(&["frobnicate"]), 0);
    assert_ne!(cli(&["verify", "--no-such-flag"]), 0);
    assert_ne!(cli(&["train", "--steps", "1"]), 0);
    assert_ne!(cli(&[]), 0);
    assert_ne!(cli(&["train", "--seed", "1", "--set", "unknown_key=3"]), 0);
}

#[test]
fn cli_train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("tiny.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&tiny(Variant::Baseline)).unwrap(),
    )
    .unwrap();
    let c = config_path.to_str().unwrap();

    let mut bytes = Vec::new();
    for round in ["a", "b"] {
        let out = dir.path().join(round);
        let code = cli(&[
            "train",
            "--config",
            c,
            "--seed",
            "1",
            "--variant",
            "layer",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        bytes.push(std::fs::read(out.join("layer_O2_K3_seed1/checkpoint.bin")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);

    let ckpt = dir.path().join("a/layer_O2_K3_seed1/checkpoint.bin");
    let csv = dir.path().join("sweep.csv");
    let code = cli(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--slots",
        "5,7,9,11",
        "--set",
        "eval_scenes=4",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let results = read_results_csv(&csv).unwrap();
    let slots: BTreeSet<usize> = results.iter().map(|r| r.eval_slots).collect();
    assert_eq!(slots, BTreeSet::from([5, 7, 9, 11]));
    assert!(results
        .iter()
        .all(|r| r.variant == Variant::Layer && r.seed == 1));

    // A config naming another variant does not match the checkpoint.
    assert_ne!(
        cli(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            c
        ]),
        0
    );

    let report = dir.path().join("report");
    assert_eq!(
        cli(&[
            "report",
            csv.to_str().unwrap(),
            "--out",
            report.to_str().unwrap()
        ]),
        0
    );
    assert!(report.join("results.csv").exists());
    assert!(report.join("l2_vs_slots.svg").exists());

    let split = dir.path().join("test.bin");
    assert_eq!(
        cli(&[
            "generate",
            "--config",
            c,
            "--count",
            "5",
            "--out",
            split.to_str().unwrap()
        ]),
        0
    );
    let (_, scenes) = slotnorm::dataset::read_split(&split).unwrap();
    assert_eq!(scenes.len(), 5);
}

#[test]
fn cli_verify_passes() {
    assert_eq!(cli(&["verify"]), 0);
}
