//! Oracles shared by several integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotnorm::{Tape, Tensor, Var};

/// Every set partition of `n` elements as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<u8>> {
    fn extend(prefix: &mut Vec<u8>, max: u8, n: usize, out: &mut Vec<Vec<u8>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for label in 0..=max + 1 {
            prefix.push(label);
            extend(prefix, max.max(label), n, out);
            prefix.pop();
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    extend(&mut vec![0], 0, n, &mut out);
    out
}

/// Adjusted Rand index from explicit pair counting, as an unreduced fraction
/// `(numerator, denominator)`; `None` when the denominator vanishes.
///
/// With `n11` pairs together in both partitions, `n00` apart in both and
/// `n10`/`n01` the disagreements, the index is
/// `2(n00·n11 − n01·n10) / ((n00 + n01)(n01 + n11) + (n00 + n10)(n10 + n11))`.
pub fn pair_counting_ari(pred: &[u8], truth: &[u8]) -> Option<(i128, i128)> {
    let (mut n11, mut n10, mut n01, mut n00) = (0i128, 0i128, 0i128, 0i128);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => n11 += 1,
                (true, false) => n10 += 1,
                (false, true) => n01 += 1,
                (false, false) => n00 += 1,
            }
        }
    }
    let num = 2 * (n00 * n11 - n01 * n10);
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    (den != 0).then_some((num, den))
}

/// Float value of the pair-counting oracle with the single-cluster
/// convention (vanishing denominator means identical trivial partitions).
pub fn pair_counting_ari_f64(pred: &[u8], truth: &[u8]) -> f64 {
    pair_counting_ari(pred, truth).map_or(1.0, |(n, d)| n as f64 / d as f64)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an output with fixed random weights so that every output entry
/// contributes a distinct amount to the scalar under test.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> slotnorm::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

pub type Primitive = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Tape, &[Var]) -> slotnorm::Result<Var>,
);

/// Every differentiable primitive with small input shapes. Divisor-like
/// inputs are shifted away from zero by the closure itself.
pub fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v| {
            t.add_broadcast(v[0], v[1])
        }),
        ("div_rows", vec![vec![3, 4], vec![3]], |t, v| {
            let d = t.square(v[1]);
            let d = t.add_const(d, 0.5);
            t.div_rows(v[0], d)
        }),
        ("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -1.7))),
        (
            "add_const",
            vec![vec![5]],
            |t, v| Ok(t.add_const(v[0], 0.3)),
        ),
        ("mul_scalar", vec![vec![2, 3], vec![]], |t, v| {
            t.mul_scalar(v[0], v[1])
        }),
        ("add_scalar", vec![vec![2, 3], vec![]], |t, v| {
            t.add_scalar(v[0], v[1])
        }),
        ("sub_scalar", vec![vec![2, 3], vec![]], |t, v| {
            t.sub_scalar(v[0], v[1])
        }),
        ("relu", vec![vec![6]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![vec![6]], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![vec![6]], |t, v| Ok(t.tanh(v[0]))),
        ("exp", vec![vec![6]], |t, v| Ok(t.exp(v[0]))),
        ("sqrt", vec![vec![6]], |t, v| {
            let s = t.square(v[0]);
            let s = t.add_const(s, 0.5);
            Ok(t.sqrt(s))
        }),
        ("recip", vec![vec![6]], |t, v| {
            let s = t.square(v[0]);
            let s = t.add_const(s, 0.5);
            Ok(t.recip(s))
        }),
        ("square", vec![vec![6]], |t, v| Ok(t.square(v[0]))),
        ("sum", vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("column_sums", vec![vec![4, 3]], |t, v| t.column_sums(v[0])),
        ("softmax_rows", vec![vec![3, 4]], |t, v| {
            t.softmax_rows(v[0], 0.8)
        }),
        (
            "layer_norm_rows",
            vec![vec![3, 5], vec![5], vec![5]],
            |t, v| t.layer_norm_rows(v[0], v[1], v[2], 1e-5),
        ),
        (
            "conv2d",
            vec![vec![2, 5, 4, 2], vec![3, 3, 2, 3], vec![3]],
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
        ),
        (
            "conv2d_stride2",
            vec![vec![1, 6, 5, 2], vec![3, 3, 2, 2], vec![2]],
            |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
        ),
        (
            "conv_transpose2d",
            vec![vec![2, 3, 2, 2], vec![2, 5, 5, 3], vec![3]],
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 2, 1),
        ),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        ("slice_rows", vec![vec![5, 2]], |t, v| {
            t.slice_rows(v[0], 1, 3)
        }),
        ("broadcast_rows", vec![vec![2, 3]], |t, v| {
            t.broadcast_rows(v[0], 4)
        }),
        ("alpha_blend", vec![vec![2, 3, 4, 4]], |t, v| {
            Ok(t.alpha_blend(v[0])?.0)
        }),
    ]
}
