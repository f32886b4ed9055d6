use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotnorm::tensor::{grad_check, grad_check_many, GradCheckOptions, LayerNormParams};
use slotnorm::{Error, Tape, Tensor};

mod common;
use common::{primitives, random, weighted_sum};

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

#[test]
fn matmul_gradient_is_row_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(c);
    let grads = tape.backward(loss).unwrap();
    let ga = grads.get(va).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let row_sum: f64 = b.row(j).iter().sum();
            assert!((ga.at2(i, j) - row_sum).abs() < 1e-12);
        }
    }
    let err = grad_check(
        |t, x| {
            let vb = t.constant(b.clone());
            let c = t.matmul(x, vb)?;
            Ok(t.sum(c))
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let m = tape.constant(
        Tensor::from_rows(&[vec![0.7, 0.7, 0.7], vec![1f64.ln(), 3f64.ln(), 0.0]]).unwrap(),
    );
    let m = tape.slice_rows(m, 0, 1).unwrap();
    let s = tape.softmax_rows(m, 1.0).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let m = tape.constant(Tensor::from_rows(&[vec![1f64.ln(), 3f64.ln()]]).unwrap());
    let s = tape.softmax_rows(m, 1.0).unwrap();
    let got = tape.value(s).data();
    assert!((got[0] - 0.25).abs() < 1e-15 && (got[1] - 0.75).abs() < 1e-15);

    assert!(matches!(
        tape.softmax_rows(m, 0.0),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn softmax_rows_sum_to_one_for_extreme_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scale in [1e-3, 1.0, 50.0, 700.0] {
        let x = random(&mut rng, &[20, 7]).map(|v| v * scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v, 0.5).unwrap();
        let out = tape.value(s);
        assert!(out.is_finite());
        for r in 0..20 {
            let total: f64 = out.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 4]);
    let err = grad_check(
        |t, x| {
            let s = t.softmax_rows(x, 1.7)?;
            let sq = t.square(s);
            Ok(t.sum(sq))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_examples() {
    // Constant row maps to beta exactly.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![2.5; 4]]).unwrap());
    let alpha = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]));
    let beta = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
    let y = tape.layer_norm_rows(x, alpha, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);

    // Projection onto 1-perp: sum_d (y_d - beta_d) / alpha_d == 0.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = LayerNormParams::new(
        positive(&mut rng, &[8]).into_data(),
        random(&mut rng, &[8]).into_data(),
        1e-5,
    )
    .unwrap();
    for _ in 0..50 {
        let x = random(&mut rng, &[8]).map(|v| v * 10.0);
        let y = p.apply(x.data()).unwrap();
        let s: f64 = (0..8).map(|d| (y[d] - p.beta[d]) / p.alpha[d]).sum();
        assert!(s.abs() < 1e-10, "{s}");
        // Tape and plain implementations agree.
        let mut tape = Tape::new();
        let xv = tape.constant(x.reshape(&[1, 8]).unwrap());
        let a = tape.constant(Tensor::vector(p.alpha.clone()));
        let b = tape.constant(Tensor::vector(p.beta.clone()));
        let yv = tape.layer_norm_rows(xv, a, b, p.eps).unwrap();
        assert_eq!(tape.value(yv).data(), y.as_slice());
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 6]);
    let alpha = positive(&mut rng, &[6]);
    let beta = random(&mut rng, &[6]);
    let err = grad_check_many(
        |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 9)
        },
        &[x.clone(), alpha.clone(), beta],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    // Plain sum of the output, as in the layer-norm-then-sum check.
    let err = grad_check(
        |t, x| {
            let a = t.constant(alpha.clone());
            let b = t.constant(Tensor::zeros(&[6]));
            let y = t.layer_norm_rows(x, a, b, 1e-5)?;
            Ok(t.sum(y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let grads = tape.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(grads.get(loss).unwrap().data(), &[1.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Contract { .. })));
}

#[test]
fn grad_check_of_linear_function_is_exact_up_to_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[4, 3]);
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-6).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[5, 4]);
    let w = random(&mut rng, &[4, 3]);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let s = tape.softmax_rows(h, 2.0).unwrap();
        let t = tape.tanh(s);
        let loss = tape.sum(t);
        let g = tape.backward(loss).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}

fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bs, h, wd, cin] = x.shape()[..] else {
        panic!()
    };
    let [k, _, _, cout] = w.shape()[..] else {
        panic!()
    };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bs * ho * wo * cout];
    for n in 0..bs {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv =
                                    x.data()[((n * h + iy as usize) * wd + ix as usize) * cin + ci];
                                let wv = w.data()[((ky * k + kx) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[bs, ho, wo, cout], out).unwrap()
}

fn naive_conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let [bs, h, wd, cin] = x.shape()[..] else {
        panic!()
    };
    let [_, k, _, cout] = w.shape()[..] else {
        panic!()
    };
    let ho = (h - 1) * stride + k + out_pad - 2 * pad;
    let wo = (wd - 1) * stride + k + out_pad - 2 * pad;
    let mut out = vec![0.0; bs * ho * wo * cout];
    for n in 0..bs {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    out[((n * ho + oy) * wo + ox) * cout + co] = b.data()[co];
                }
            }
        }
        for iy in 0..h {
            for ix in 0..wd {
                for ky in 0..k {
                    for kx in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            for co in 0..cout {
                                let xv = x.data()[((n * h + iy) * wd + ix) * cin + ci];
                                let wv = w.data()[((ci * k + ky) * k + kx) * cout + co];
                                out[((n * ho + oy as usize) * wo + ox as usize) * cout + co] +=
                                    xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[bs, ho, wo, cout], out).unwrap()
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (stride, pad, k) in [(1, 2, 5), (2, 1, 3), (1, 0, 3)] {
        let x = random(&mut rng, &[2, 7, 6, 3]);
        let w = random(&mut rng, &[k, k, 3, 4]);
        let b = random(&mut rng, &[4]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let expected = naive_conv2d(&x, &w, &b, stride, pad);
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_naive_loops_and_doubles_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 4, 4, 3]);
    let w = random(&mut rng, &[3, 5, 5, 2]);
    let b = random(&mut rng, &[2]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv_transpose2d(xv, wv, bv, 2, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 8, 8, 2]);
    let expected = naive_conv_transpose2d(&x, &w, &b, 2, 2, 1);
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);

    let w3 = random(&mut rng, &[3, 3, 3, 4]);
    let b3 = random(&mut rng, &[4]);
    let (wv, bv) = (tape.constant(w3.clone()), tape.constant(b3.clone()));
    let y = tape.conv_transpose2d(xv, wv, bv, 1, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
    assert!(
        tape.value(y)
            .max_abs_diff(&naive_conv_transpose2d(&x, &w3, &b3, 1, 1, 0))
            < 1e-12
    );
}

#[test]
fn alpha_blend_masks_are_a_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[2, 3, 5, 4]).map(|v| v * 5.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (_, masks) = tape.alpha_blend(xv).unwrap();
    for l in 0..2 {
        for p in 0..5 {
            let total: f64 = (0..3).map(|k| masks.data()[(l * 3 + k) * 5 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn every_primitive_passes_grad_check_at_100_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, op) in primitives() {
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = grad_check_many(
                |t, v| {
                    let y = op(t, v)?;
                    weighted_sum(t, y, 1000 + trial)
                },
                &inputs,
                GradCheckOptions::default(),
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "{name}: worst relative error {worst}");
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.matmul(a, a), Err(Error::Shape { .. })));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    let z = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.div_rows(a, z), Err(Error::DivisionByZero(_))));
    assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
}
