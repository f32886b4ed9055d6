//! Randomized numerical checks of the mixture-model view of Slot Attention,
//! shared by the `verify` subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::params::ParamStore;
use crate::slot_attention::{NormalizationMode, SlotAttention, SlotAttentionConfig, SumScale};
use crate::tensor::{LayerNormParams, Tape, Tensor};
use crate::vmf_em::{affine_decompose, duplicate_slot_report, recovery_function};

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation observed (or smallest margin for lower bounds).
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl std::fmt::Display for TheoryCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.0e}, {} instances)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Slot Attention with default initialization plus N(0, 0.5²) noise on
/// every parameter, so layer-norm gains and biases are generic.
pub fn jittered_slot_attention(
    mode: NormalizationMode,
    dim: usize,
    seed: u64,
) -> Result<(ParamStore, SlotAttention)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sa = SlotAttention::new(
        &mut store,
        &mut rng,
        "sa",
        SlotAttentionConfig::new(dim, dim, 2 * dim, mode),
    )?;
    for id in store.ids().collect::<Vec<_>>() {
        let v = store.get(id).clone();
        let noise = randn(&mut rng, v.shape(), 0.5);
        let data = v
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        store.set(id, Tensor::from_parts(v.shape().to_vec(), data))?;
    }
    Ok((store, sa))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(name: &'static str, worst: f64, tolerance: f64, instances: usize) -> TheoryCheck {
    TheoryCheck {
        name,
        passed: worst < tolerance,
        worst,
        tolerance,
        instances,
    }
}

/// Weighted-sum update codes determine each slot's attention mass:
/// `f(u_k) = Σ_n γ_{n,k} / N` over random instances with `K ∈ 1..=6`, `N = 50`.
pub fn column_sum_recovery(instances: usize, seed: u64) -> Result<TheoryCheck> {
    let (n, d) = (50, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (scale, c) = if i % 2 == 0 {
            (SumScale::TokenCount, n as f64)
        } else {
            let c = rng.random_range(0.5..5.0);
            (SumScale::Constant(c), c)
        };
        let (store, sa) = jittered_slot_attention(
            NormalizationMode::WeightedSum { scale },
            d,
            seed ^ (i as u64 + 1),
        )?;
        let k = rng.random_range(1..=6);
        let b = store.get(sa.value.weight).transpose()?;
        let f = recovery_function(&affine_decompose(&b, &sa.input_norm.params(&store))?, c, n)?;

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(randn(&mut rng, &[n, d], 2.0));
        let s = tape.constant(randn(&mut rng, &[k, d], 2.0));
        let att = sa.compute_attention(&mut tape, &p, x, s)?;
        let u = sa.aggregate(&mut tape, &p, att.gamma, att.values, None)?;
        let (g, u) = (tape.value(att.gamma), tape.value(u));
        for kk in 0..k {
            let fraction = (0..n).map(|r| g.at2(r, kk)).sum::<f64>() / n as f64;
            worst = worst.max((f.eval(u.row(kk)) - fraction).abs());
        }
    }
    Ok(check(
        "weighted-sum column-sum recovery",
        worst,
        1e-9,
        instances,
    ))
}

/// Weighted-mean codes of one slot and of that slot duplicated coincide,
/// while the attention mass splits exactly in half.
pub fn duplicate_slot_witness(instances: usize, seed: u64) -> Result<TheoryCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (store, sa) =
            jittered_slot_attention(NormalizationMode::WeightedMean, 6, seed ^ (i as u64 + 1))?;
        let inputs = randn(&mut rng, &[15, 6], 1.5);
        let r = duplicate_slot_report(&sa, &store, &inputs)?;
        let fractions_exact = r.single_fraction == 1.0 && r.double_fractions == [0.5, 0.5];
        worst = worst.max(if fractions_exact {
            r.max_code_gap
        } else {
            f64::INFINITY
        });
    }
    Ok(check(
        "weighted-mean duplicate-slot indistinguishability",
        worst,
        1e-12,
        instances,
    ))
}

/// Images `B · LayerNorm(x)` lie in `a + V` for random `B`, gains, biases and
/// inputs. Reports the largest residual over `draws × samples` points.
pub fn layer_norm_affine_subspace(draws: usize, samples: usize, seed: u64) -> Result<TheoryCheck> {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let b = randn(&mut rng, &[d, d], 1.0);
        let ln = LayerNormParams::new(
            randn(&mut rng, &[d], 1.0).into_data(),
            randn(&mut rng, &[d], 1.0).into_data(),
            1e-5,
        )?;
        let dec = affine_decompose(&b, &ln)?;
        for _ in 0..samples {
            let x = randn(&mut rng, &[d], 3.0);
            let y = ln.apply(x.data())?;
            let image: Vec<f64> = (0..d).map(|r| dot(b.row(r), &y)).collect();
            let rel: Vec<f64> = image.iter().zip(&dec.a).map(|(s, a)| s - a).collect();
            let pv = dec.project_v(&rel);
            let residual = rel
                .iter()
                .zip(&pv)
                .map(|(r, p)| (r - p).abs())
                .fold(0.0, f64::max);
            worst = worst.max(residual);
        }
    }
    Ok(check(
        "layer-norm images in affine subspace",
        worst,
        1e-8,
        draws * samples,
    ))
}

/// The translation `a` is nonzero for generic parameters. `worst` is the
/// reciprocal of the smallest `‖a‖` seen, so the check passes when every
/// draw has `‖a‖ > 1e-6`.
pub fn translation_nonzero(draws: usize, seed: u64) -> Result<TheoryCheck> {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut smallest = f64::INFINITY;
    for _ in 0..draws {
        let b = randn(&mut rng, &[d, d], 1.0);
        let ln = LayerNormParams::new(
            randn(&mut rng, &[d], 1.0).into_data(),
            randn(&mut rng, &[d], 1.0).into_data(),
            1e-5,
        )?;
        let dec = affine_decompose(&b, &ln)?;
        smallest = smallest.min(dot(&dec.a, &dec.a).sqrt());
    }
    Ok(check(
        "generic translation is nonzero",
        1.0 / smallest,
        1e6,
        draws,
    ))
}

/// `|u_{k,d}| ≤ max_n |v_{n,d}|` for weighted-sum codes with `C = N`.
pub fn weighted_sum_boundedness(instances: usize, seed: u64) -> Result<TheoryCheck> {
    let d = 4;
    let (store, sa) = jittered_slot_attention(
        NormalizationMode::WeightedSum {
            scale: SumScale::TokenCount,
        },
        d,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let n = rng.random_range(1..=20);
        let k = rng.random_range(1..=7);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let logits = tape.constant(randn(&mut rng, &[n, k], 3.0));
        let gamma = tape.softmax_rows(logits, 1.0)?;
        let values = randn(&mut rng, &[n, d], 5.0);
        let v = tape.constant(values.clone());
        let u = sa.aggregate(&mut tape, &p, gamma, v, None)?;
        let u = tape.value(u);
        for dd in 0..d {
            let bound = (0..n).map(|r| values.at2(r, dd).abs()).fold(0.0, f64::max);
            for kk in 0..k {
                worst = worst.max(u.at2(kk, dd).abs() - bound);
            }
        }
    }
    Ok(TheoryCheck {
        name: "weighted-sum boundedness",
        passed: worst <= 1e-12,
        worst: worst.max(0.0),
        tolerance: 1e-12,
        instances,
    })
}

/// Every check at the sizes used for release verification.
pub fn run_theory_suite(seed: u64) -> Result<Vec<TheoryCheck>> {
    Ok(vec![
        column_sum_recovery(200, seed)?,
        duplicate_slot_witness(20, seed)?,
        layer_norm_affine_subspace(10, 100, seed)?,
        translation_nonzero(100, seed)?,
        weighted_sum_boundedness(1000, seed)?,
    ])
}
