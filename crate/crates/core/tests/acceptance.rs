//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured quantity, then asserts on it.
//!
//! The full-scale trend experiment (criterion 7) is `#[ignore]`d; the
//! non-ignored variant evaluates a results CSV named by
//! `SLOTNORM_TREND_RESULTS` when that variable is set.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{pair_counting_ari, primitives, random, set_partitions, weighted_sum};

use slotnorm::autoencoder::{Autoencoder, AutoencoderConfig};
use slotnorm::harness::report::read_results_csv;
use slotnorm::harness::{
    emit_report, evaluate_sweep, save_run, train, trend_check, ExperimentConfig, SweepResult,
    Variant,
};
use slotnorm::metrics::{contingency, foreground_ari};
use slotnorm::params::{Bound, ParamStore};
use slotnorm::slot_attention::{BatchStats, NormalizationMode, SumScale};
use slotnorm::tensor::{grad_check_many, GradCheckOptions};
use slotnorm::theory::{
    column_sum_recovery, duplicate_slot_witness, jittered_slot_attention,
    layer_norm_affine_subspace, randn, translation_nonzero, weighted_sum_boundedness, TheoryCheck,
};
use slotnorm::vmf_em::{em_fit, match_directions, random_direction, sample_vmf};
use slotnorm::{Tape, Tensor, Var};

const TREND_RESULTS_ENV: &str = "SLOTNORM_TREND_RESULTS";

/// Writes straight to the process stdout so the line is visible without
/// `--nocapture`.
fn report(criterion: &str, passed: bool, detail: impl std::fmt::Display) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion}: {status}: {detail}").unwrap();
    out.flush().unwrap();
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed < Duration::from_secs(budget_secs)
}

fn modes() -> Vec<NormalizationMode> {
    vec![
        NormalizationMode::WeightedMean,
        NormalizationMode::LayerNormed,
        NormalizationMode::WeightedSum {
            scale: SumScale::TokenCount,
        },
        NormalizationMode::batch_scaled(),
    ]
}

fn training_stats(mode: &NormalizationMode) -> Option<BatchStats> {
    match mode {
        NormalizationMode::BatchScaled { momentum, .. } => Some(BatchStats::new(*momentum)),
        _ => None,
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn criterion_1_theory_suite() {
    let start = Instant::now();
    let checks: Vec<TheoryCheck> = vec![
        column_sum_recovery(200, 1).unwrap(),
        duplicate_slot_witness(20, 1).unwrap(),
        layer_norm_affine_subspace(10, 100, 1).unwrap(),
        translation_nonzero(100, 1).unwrap(),
    ];
    let elapsed = start.elapsed();
    let passed = checks.iter().all(|c| c.passed) && within(elapsed, 60);
    let detail: Vec<String> = checks.iter().map(|c| c.to_string()).collect();
    report(
        "1",
        passed,
        format!("{}; {:.1?}", detail.join("; "), elapsed),
    );
    assert!(passed);
}

#[test]
fn criterion_2_weighted_sum_boundedness() {
    let start = Instant::now();
    let check = weighted_sum_boundedness(1000, 2).unwrap();
    let elapsed = start.elapsed();
    let passed = check.passed && within(elapsed, 60);
    report("2", passed, format!("{check}; {elapsed:.1?}"));
    assert!(passed);
}

#[test]
fn criterion_3_attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for (m, mode) in modes().into_iter().enumerate() {
        let (store, sa) = jittered_slot_attention(mode, 6, 30 + m as u64).unwrap();
        let stats = training_stats(&mode);
        for _ in 0..25 {
            let k = rng.random_range(2..=6);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let inputs = [
                randn(&mut rng, &[12, 6], 1.5),
                randn(&mut rng, &[12, 6], 1.5),
            ];
            let init = [randn(&mut rng, &[k, 6], 1.0), randn(&mut rng, &[k, 6], 1.0)];
            let run = |init: &[Tensor; 2]| {
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let x: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let s: Vec<Var> = init.iter().map(|t| tape.constant(t.clone())).collect();
                let out = sa
                    .run_batch(&mut tape, &p, &x, &s, 3, stats.as_ref())
                    .unwrap();
                let slots: Vec<Tensor> = out.slots.iter().map(|&v| tape.value(v).clone()).collect();
                let gammas: Vec<Tensor> =
                    out.gammas.iter().map(|&v| tape.value(v).clone()).collect();
                (slots, gammas)
            };
            let (base_slots, base_gammas) = run(&init);
            for g in &base_gammas {
                let (n, _) = g.dims2().unwrap();
                for r in 0..n {
                    worst_row = worst_row.max((g.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
            let (slots, gammas) =
                run(&[permute_rows(&init[0], &perm), permute_rows(&init[1], &perm)]);
            for l in 0..2 {
                worst_perm =
                    worst_perm.max(slots[l].max_abs_diff(&permute_rows(&base_slots[l], &perm)));
                let expected = permute_rows(&base_gammas[l].transpose().unwrap(), &perm);
                worst_perm = worst_perm.max(gammas[l].transpose().unwrap().max_abs_diff(&expected));
            }
        }
    }
    let passed = worst_row < 1e-12 && worst_perm < 1e-12;
    report(
        "3",
        passed,
        format!("max |row sum - 1| {worst_row:.2e}, max permutation gap {worst_perm:.2e} (4 modes, tolerance 1e-12)"),
    );
    assert!(passed);
}

#[test]
fn criterion_4_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut primitive_worst: f64 = 0.0;
    let mut worst_name = "";
    let prims = primitives();
    for (name, shapes, op) in &prims {
        for trial in 0..100 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = grad_check_many(
                |t, v| {
                    let y = op(t, v)?;
                    weighted_sum(t, y, 500 + trial)
                },
                &inputs,
                GradCheckOptions::default(),
            )
            .unwrap();
            if err > primitive_worst {
                primitive_worst = err;
                worst_name = name;
            }
        }
    }

    let mut slot_worst: f64 = 0.0;
    for (m, mode) in modes().into_iter().enumerate() {
        let (store, sa) = jittered_slot_attention(mode, 4, 40 + m as u64).unwrap();
        let stats = training_stats(&mode);
        let mut all: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        all.push(randn(&mut rng, &[5, 4], 1.0));
        all.push(randn(&mut rng, &[3, 4], 1.0));
        let np = store.len();
        let err = grad_check_many(
            |tape, vars| {
                let p = Bound::from_vars(vars[..np].to_vec());
                let (slots, _, _) = sa.run(tape, &p, vars[np], vars[np + 1], 1, stats.as_ref())?;
                weighted_sum(tape, slots, 41 + m as u64)
            },
            &all,
            GradCheckOptions::default(),
        )
        .unwrap();
        slot_worst = slot_worst.max(err);
    }

    let mut model_worst: f64 = 0.0;
    for (m, mode) in modes().into_iter().enumerate() {
        let config = AutoencoderConfig {
            resolution: 16,
            encoder_channels: 6,
            encoder_layers: 2,
            decoder_channels: 6,
            broadcast: 4,
            upsample_layers: 2,
            dim: 16,
            slot_mlp_hidden: 16,
            mode,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(50 + m as u64);
        let mut store = ParamStore::new();
        let model = Autoencoder::new(&mut store, &mut init_rng, config).unwrap();
        let data = (0..2 * 16 * 16 * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let images = Tensor::new(&[2, 16, 16, 3], data).unwrap();
        let stats = training_stats(&mode);
        let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check_many(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let mut slot_rng = ChaCha8Rng::seed_from_u64(51);
                Ok(model
                    .forward(tape, &p, &images, 3, 1, stats.as_ref(), &mut slot_rng)?
                    .loss)
            },
            &params,
            GradCheckOptions {
                max_coords_per_input: Some(3),
                seed: 52,
                ..Default::default()
            },
        )
        .unwrap();
        model_worst = model_worst.max(err);
    }

    let elapsed = start.elapsed();
    let passed =
        primitive_worst < 1e-5 && slot_worst < 1e-5 && model_worst < 1e-4 && within(elapsed, 300);
    report(
        "4",
        passed,
        format!(
            "{} primitives x 100 points worst rel. err {primitive_worst:.2e} ({worst_name}); \
             one-iteration slot attention {slot_worst:.2e} (tolerance 1e-5); \
             toy autoencoder {model_worst:.2e} (tolerance 1e-4); {elapsed:.1?}",
            prims.len()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_5_vmf_em() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_decrease: f64 = 0.0;
    for init in 0..100 {
        let d = rng.random_range(2..=6);
        let k = rng.random_range(1..=5);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| random_direction(&mut rng, d)).collect();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|n| sample_vmf(&mut rng, &centers[n % k], 3.0).unwrap())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let tau = rng.random_range(0.1..1.5);
        let (_, trace) = em_fit(&x, k, 30, tau, init).unwrap();
        for w in trace.windows(2) {
            worst_decrease = worst_decrease.max(w[0] - w[1]);
        }
    }

    let tau = 0.1;
    let truth = Tensor::identity(3);
    let mut recovered = 0;
    let mut worst_angle: f64 = 0.0;
    for trial in 0..50u64 {
        let mut trial_rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let mut rows = Vec::new();
        for k in 0..3 {
            for _ in 0..200 {
                rows.push(sample_vmf(&mut trial_rng, truth.row(k), 1.0 / tau).unwrap());
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let (mix, _) = em_fit(&x, 3, 100, tau, trial).unwrap();
        let (_, angle) = match_directions(&mix.directions, &truth).unwrap();
        if angle < 5.0 {
            recovered += 1;
            worst_angle = worst_angle.max(angle);
        }
    }
    let elapsed = start.elapsed();
    let passed = worst_decrease <= 1e-9 && recovered * 100 >= 95 * 50 && within(elapsed, 120);
    report(
        "5",
        passed,
        format!(
            "largest log-likelihood decrease {worst_decrease:.2e} over 100 inits (tolerance 1e-9); \
             planted recovery {recovered}/50 within 5 degrees (worst recovered {worst_angle:.2} degrees); {elapsed:.1?}"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_6_metric_oracles() {
    let start = Instant::now();
    let mut pairs = 0u64;
    let mut mismatches = 0u64;
    for n in 1..=8 {
        let parts = set_partitions(n);
        for p in &parts {
            for t in &parts {
                pairs += 1;
                let table = contingency(p, t, None).unwrap();
                let agree = match (table.ari_fraction(), pair_counting_ari(p, t)) {
                    (Some((a, b)), Some((c, d))) => a * d == c * b,
                    (None, None) => true,
                    _ => false,
                };
                if !agree {
                    mismatches += 1;
                }
            }
        }
    }

    // Background pixels (label 0) may receive any prediction without
    // changing the score.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut perturbation_gap: f64 = 0.0;
    for _ in 0..500 {
        let truth: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        if truth.iter().filter(|&&t| t != 0).count() < 2 {
            continue;
        }
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..6)).collect();
        let base = foreground_ari(&pred, &truth, 0).unwrap();
        let perturbed: Vec<u8> = pred
            .iter()
            .zip(&truth)
            .map(|(&p, &t)| if t == 0 { rng.random_range(0..10) } else { p })
            .collect();
        perturbation_gap =
            perturbation_gap.max((foreground_ari(&perturbed, &truth, 0).unwrap() - base).abs());
    }
    let elapsed = start.elapsed();
    let passed = mismatches == 0 && perturbation_gap == 0.0;
    report(
        "6",
        passed,
        format!(
            "{mismatches} exact mismatches over {pairs} partition pairs (n <= 8); \
             F-ARI change under background perturbation {perturbation_gap:e}; {elapsed:.1?}"
        ),
    );
    assert!(passed);
}

fn full_scale_config(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        train_objects: 4,
        train_slots: 5,
        eval_slots: vec![5, 7, 9, 11],
        seeds: vec![0, 1, 2],
        steps: 20_000,
        ..ExperimentConfig::default()
    }
}

fn judge_trend(results: &[SweepResult], source: &str) {
    let check = trend_check(results, 0.5, 5, 11).unwrap();
    let medians: Vec<String> = check
        .medians
        .iter()
        .map(|(v, (lo, hi))| format!("{v} {lo:.3}->{hi:.3}"))
        .collect();
    report(
        "7",
        check.passed(),
        format!(
            "median F-ARI K'=5->11: {}; baseline drop {:.3} vs weighted-sum drop {:.3} ({}); \
             scaled variants at K'=11 >= baseline: {} ({source})",
            medians.join(", "),
            check.drop(Variant::Baseline),
            check.drop(Variant::WeightedSum),
            check.baseline_drops_more,
            check.scaled_variants_hold_up,
        ),
    );
    assert!(check.passed());
}

/// Full desk-scale experiment: four variants, three seeds, 20k steps each.
/// About 66 CPU-hours with the default model on one core.
#[test]
#[ignore = "full-scale training run; many CPU-hours"]
fn criterion_7_trend_reproduction_full_scale() {
    let out: PathBuf = std::env::var_os("SLOTNORM_TREND_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/trend"));
    let mut results = Vec::new();
    for variant in Variant::ALL {
        let config = full_scale_config(variant);
        for &seed in &config.seeds {
            let (trained, log) = train(&config, seed).unwrap();
            save_run(&out, &trained, &log).unwrap();
            results.extend(evaluate_sweep(&trained, &config).unwrap());
        }
    }
    emit_report(&results, &out, 0.5).unwrap();
    judge_trend(
        &results,
        &format!("trained here, report in {}", out.display()),
    );
}

#[test]
fn criterion_7_trend_reproduction_from_results() {
    match std::env::var_os(TREND_RESULTS_ENV) {
        Some(path) => {
            let results = read_results_csv(Path::new(&path)).unwrap();
            judge_trend(
                &results,
                &format!("results from {}", Path::new(&path).display()),
            );
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(
                out,
                "criterion 7: NOT RUN: needs the full-scale training run \
                 (cargo test --test acceptance -- --ignored) or {TREND_RESULTS_ENV}=<results.csv>"
            )
            .unwrap();
        }
    }
}

fn small_config(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        train_objects: 2,
        train_slots: 3,
        eval_slots: vec![2, 3, 4],
        eval_max_objects: 3,
        eval_scenes: 8,
        val_scenes: 4,
        warmup_steps: 2,
        half_life: 4,
        batch_size: 2,
        steps: 5,
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

fn run_cli(args: &[&str], threads: &str) {
    let output = Command::new(env!("CARGO_BIN_EXE_slotnorm"))
        .args(args)
        .env("SLOTNORM_THREADS", threads)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "slotnorm {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut total = 0;
    for variant in Variant::ALL {
        let config = small_config(variant);
        let mut runs = Vec::new();
        for attempt in 0..2 {
            let (trained, log) = train(&config, 7).unwrap();
            let files = save_run(&dir.path().join(format!("{attempt}")), &trained, &log).unwrap();
            let sweep = evaluate_sweep(&trained, &config).unwrap();
            let bits: Vec<[u64; 3]> = sweep
                .iter()
                .map(|r| [r.f_ari.to_bits(), r.ari.to_bits(), r.l2.to_bits()])
                .collect();
            let losses: Vec<u64> = log.entries.iter().map(|e| e.loss.to_bits()).collect();
            runs.push((
                std::fs::read(&files.checkpoint).unwrap(),
                std::fs::read(&files.log).unwrap(),
                bits,
                losses,
            ));
        }
        total += 1;
        if runs[0] == runs[1] {
            identical += 1;
        }
    }

    // The command-line pipeline reproduces the same bytes with one and with
    // three evaluation worker threads.
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&small_config(Variant::Batch)).unwrap(),
    )
    .unwrap();
    let config_arg = config_path.to_str().unwrap();
    let mut cli_outputs = Vec::new();
    for (i, threads) in ["1", "3"].into_iter().enumerate() {
        let out = dir.path().join(format!("cli{i}"));
        let out_arg = out.to_str().unwrap();
        run_cli(
            &[
                "train", "--config", config_arg, "--seed", "3", "--out", out_arg,
            ],
            threads,
        );
        let run_dir = out.join(small_config(Variant::Batch).run_name(3));
        let checkpoint = run_dir.join("checkpoint.bin");
        let csv = run_dir.join("sweep.csv");
        run_cli(
            &[
                "eval",
                "--checkpoint",
                checkpoint.to_str().unwrap(),
                "--out",
                csv.to_str().unwrap(),
            ],
            threads,
        );
        cli_outputs.push((
            std::fs::read(&checkpoint).unwrap(),
            std::fs::read(&csv).unwrap(),
        ));
    }
    let cli_identical = cli_outputs[0] == cli_outputs[1];

    let passed = identical == total && cli_identical;
    report(
        "8",
        passed,
        format!(
            "{identical}/{total} variants reproduce checkpoint, log and sweep metrics bitwise; \
             CLI train+eval with 1 vs 3 threads identical: {cli_identical}"
        ),
    );
    assert!(passed);
}
