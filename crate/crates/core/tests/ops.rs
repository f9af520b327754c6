//! Tape operations against independent loop oracles and finite differences.

use lamformer_core::gradcheck::{self, uniform};
use lamformer_core::{Activation, Padding, PoolKind, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Finite differences run in f64 so the tolerance is not set by f32 rounding.
fn wide(params: &[Tensor]) -> Vec<Tensor<f64>> {
    params.iter().map(Tensor::cast).collect()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = uniform(&[5, 7], -2.0, 2.0, &mut r);
    let b = uniform(&[7, 3], -2.0, 2.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0f32;
            for p in 0..7 {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            assert!((tape.value(out).at(&[i, j]) - s).abs() < 1e-6 * (1.0 + s.abs()));
        }
    }
    assert_eq!(tape.mac_count(), 5 * 7 * 3);
}

#[test]
fn matmul_gradient_matches_analytic() {
    // loss = sum(x·w): d/dx = 1·wᵀ (row sums of w), d/dw = xᵀ·1 (column sums of x)
    let mut r = rng(2);
    let x = uniform(&[4, 3], -2.0, 2.0, &mut r);
    let w = uniform(&[3, 5], -2.0, 2.0, &mut r);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.param(&x), tape.param(&w));
    let y = tape.matmul(vx, vw).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let gx = g.get(vx).unwrap();
    let gw = g.get(vw).unwrap();
    for i in 0..4 {
        for p in 0..3 {
            let want: f32 = (0..5).map(|j| w.at(&[p, j])).sum();
            assert!((gx.at(&[i, p]) - want).abs() < 1e-6);
        }
    }
    for p in 0..3 {
        for j in 0..5 {
            let want: f32 = (0..4).map(|i| x.at(&[i, p])).sum();
            assert!((gw.at(&[p, j]) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn transposed_matmul_gradients_match_finite_differences() {
    let mut r = rng(3);
    for (ta, tb) in [(false, true), (true, false), (true, true)] {
        let a = if ta {
            uniform(&[4, 3], -2.0, 2.0, &mut r)
        } else {
            uniform(&[3, 4], -2.0, 2.0, &mut r)
        };
        let b = if tb {
            uniform(&[5, 4], -2.0, 2.0, &mut r)
        } else {
            uniform(&[4, 5], -2.0, 2.0, &mut r)
        };
        let params = vec![a, b];
        let rep = gradcheck::check(&mut wide(&params), 24, 9, |t, v| {
            t.matmul_t(v[0], v[1], ta, tb)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{ta} {tb}: {rep:?}");
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(4);
    for (stride, padding, k) in [
        (1, Padding::Explicit(1), 3),
        (2, Padding::Same, 2),
        (3, Padding::Same, 3),
    ] {
        let params = vec![
            uniform(&[2, 7, 5], -2.0, 2.0, &mut r),
            uniform(&[3, 2, k, k], -2.0, 2.0, &mut r),
        ];
        let rep = gradcheck::check(&mut wide(&params), 40, 5, |t, v| {
            t.conv2d(v[0], v[1], stride, padding)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "stride {stride}: {rep:?}");
    }
}

#[test]
fn depthwise_matches_loop_oracle() {
    let mut r = rng(5);
    let x = uniform(&[2, 3, 3], -2.0, 2.0, &mut r);
    let w = Tensor::full(&[2, 3, 3], 1.0 / 9.0);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w));
    let y = tape.depthwise_conv2d(vx, vw).unwrap();
    for c in 0..2 {
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut s = 0.0f32;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (yi, yj) = (i + di, j + dj);
                        if (0..3).contains(&yi) && (0..3).contains(&yj) {
                            s += x.at(&[c, yi as usize, yj as usize]) / 9.0;
                        }
                    }
                }
                let got = tape.value(y).at(&[c, i as usize, j as usize]);
                assert!((got - s).abs() < 1e-6, "{got} vs {s}");
            }
        }
    }
}

#[test]
fn depthwise_gradients_match_finite_differences() {
    let mut r = rng(6);
    let params = vec![
        uniform(&[2, 5, 5], -2.0, 2.0, &mut r),
        uniform(&[2, 3, 3], -2.0, 2.0, &mut r),
    ];
    let rep = gradcheck::check(&mut wide(&params), 60, 6, |t, v| {
        t.depthwise_conv2d(v[0], v[1])
    })
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn layer_norm_matches_direct_formula_and_gradients() {
    let mut r = rng(7);
    let x = uniform(&[4, 8], -2.0, 2.0, &mut r);
    let g = uniform(&[8], 0.5, 1.5, &mut r);
    let b = uniform(&[8], -0.5, 0.5, &mut r);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(g.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
    for i in 0..4 {
        let row: Vec<f64> = (0..8).map(|j| x.at(&[i, j]) as f64).collect();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want =
                (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] as f64 + b.data()[j] as f64;
            assert!((tape.value(y).at(&[i, j]) as f64 - want).abs() < 1e-6);
        }
    }
    let params = vec![x, g, b];
    let rep = gradcheck::check(&mut wide(&params), 40, 7, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn activation_gradients_match_finite_differences() {
    for kind in [
        Activation::Silu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::EluPlusOne,
    ] {
        let mut r = rng(8);
        let params = vec![uniform(&[64], -2.0, 2.0, &mut r)];
        let rep = gradcheck::check(&mut wide(&params), 64, 8, |t, v| {
            Ok(t.activation(v[0], kind))
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{kind:?}: {rep:?}");
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut r = rng(9);
    let x: Tensor<f64> = uniform(&[5], -2.0, 2.0, &mut r).cast();
    let forward = |x: &Tensor<f64>| {
        let mut tape = Tape::default();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v);
        tape.value(y).clone()
    };
    let mut worst = 0.0f64;
    for i in 0..5 {
        let mut tape = Tape::default();
        let v = tape.param(&x);
        let y = tape.softmax(v);
        let mut seed = Tensor::zeros(&[5]);
        seed.data_mut()[i] = 1.0;
        let row = tape
            .backward_seeded(y, &seed)
            .unwrap()
            .get(v)
            .unwrap()
            .clone();
        for j in 0..5 {
            let h = gradcheck::FD_STEP_WIDE;
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let numeric = (forward(&xp).data()[i] - forward(&xm).data()[i]) / (2.0 * h);
            worst = worst.max(gradcheck::relative_error(row.data()[j], numeric));
        }
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn single_and_double_precision_gradients_agree() {
    let mut r = rng(13);
    let x = uniform(&[6, 8], -2.0, 2.0, &mut r);
    let g = uniform(&[8], 0.5, 1.5, &mut r);
    let b = uniform(&[8], -0.5, 0.5, &mut r);
    let w = uniform(&[8, 4], -1.0, 1.0, &mut r);
    fn grads<T: Real>(ps: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let mut tape = Tape::default();
        let v: Vec<_> = ps.iter().map(|p| tape.param(p)).collect();
        let y = tape.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let y = tape.gelu(y);
        let y = tape.matmul(y, v[3]).unwrap();
        let y = tape.softmax(y);
        let y = tape.mul(y, y).unwrap();
        let s = tape.sum(y);
        let gs = tape.backward(s).unwrap();
        v.iter().map(|&v| gs.get(v).unwrap().clone()).collect()
    }
    let single = grads(&[x.clone(), g.clone(), b.clone(), w.clone()]);
    let double = grads(&wide(&[x, g, b, w]));
    for (s, d) in single.iter().zip(&double) {
        let scale = d.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(s.cast::<f64>().max_abs_diff(d) < 1e-5 * (1.0 + scale));
    }
}

#[test]
fn global_pool_matches_loop_oracle() {
    let mut r = rng(10);
    let x = uniform(&[3, 7, 5], -2.0, 2.0, &mut r);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let mx = tape.global_pool(vx, PoolKind::Max).unwrap();
    let av = tape.global_pool(vx, PoolKind::Avg).unwrap();
    for c in 0..3 {
        let mut m = f32::NEG_INFINITY;
        let mut s = 0.0f64;
        for i in 0..7 {
            for j in 0..5 {
                m = m.max(x.at(&[c, i, j]));
                s += x.at(&[c, i, j]) as f64;
            }
        }
        assert_eq!(tape.value(mx).data()[c], m);
        assert_eq!(tape.value(av).data()[c], (s / 35.0) as f32);
    }
    let params = vec![x];
    let rep = gradcheck::check(&mut wide(&params), 60, 3, |t, v| {
        t.global_pool(v[0], PoolKind::Avg)
    })
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
    // only the argmax of each channel carries gradient, so use a small map
    let params = vec![uniform(&[3, 2, 2], -2.0, 2.0, &mut r)];
    let rep = gradcheck::check(&mut wide(&params), 40, 3, |t, v| {
        t.global_pool(v[0], PoolKind::Max)
    })
    .unwrap();
    assert!(rep.passes(1e-4) && rep.skipped > 0, "{rep:?}");
}

#[test]
fn elementwise_and_broadcast_gradients_match_finite_differences() {
    let mut r = rng(11);
    let params = vec![
        uniform(&[3, 4], -2.0, 2.0, &mut r),
        uniform(&[3, 4], 0.5, 2.0, &mut r),
        uniform(&[4], 0.5, 2.0, &mut r),
        uniform(&[3], 0.5, 2.0, &mut r),
    ];
    let rep = gradcheck::check(&mut wide(&params), 40, 11, |t, v| {
        let p = t.mul(v[0], v[1])?;
        let q = t.div(p, v[1])?;
        let q = t.sub(q, v[0])?;
        let m = t.mul(v[0], v[1])?;
        let s = t.add(q, m)?;
        let s = t.mul_row(s, v[2])?;
        let s = t.add_row(s, v[2])?;
        let s = t.div_col(s, v[3])?;
        let s = t.mul_col(s, v[3])?;
        let s = t.add_col(s, v[3])?;
        let s = t.scale(s, 0.7);
        Ok(t.add_scalar(s, 1.0))
    })
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn shape_op_gradients_match_finite_differences() {
    let mut r = rng(12);
    let params = vec![
        uniform(&[2, 3, 4], -2.0, 2.0, &mut r),
        uniform(&[2, 1, 4], -2.0, 2.0, &mut r),
    ];
    let rep = gradcheck::check(&mut wide(&params), 30, 12, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let s = t.slice(p, 0, 1, 2)?;
        let s = t.reshape(s, &[4, 4])?;
        let a = t.sum_rows(s)?;
        let sq = t.mul(s, s)?;
        let b = t.sum_rows(sq)?;
        t.concat(&[a, b], 0)
    })
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}
