use lamformer_core::attention::{
    linear_attention, reduced_self_attention, softmax_attention, AttentionParams, DENOMINATOR_EPS,
};
use lamformer_core::gradcheck::{self, uniform};
use lamformer_core::{ParamBuilder, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(c: usize, d: usize, ratio: Option<usize>, seed: u64) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let p = match ratio {
        Some(r) => AttentionParams::init_reduced(&mut b, c, d, r),
        None => AttentionParams::init(&mut b, c, d),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in store.tensors_mut() {
        *t = uniform(t.shape(), -0.8, 0.8, &mut rng);
    }
    (store, p)
}

fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[1];
    (0..n)
        .map(|i| {
            (0..out)
                .map(|j| {
                    (0..c)
                        .map(|k| x.at(&[i, k]) as f64 * w.at(&[k, j]) as f64)
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn phi(u: f64) -> f64 {
    if u > 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

/// Left-hand form: `Z_i = Σ_j (Q_i·K_j) V_j / (Σ_j Q_i·K_j + ε)`.
fn linear_double_loop(x: &Tensor, store: &ParamStore, p: &AttentionParams) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = project(x, store.get(p.w_q))
        .into_iter()
        .map(|r| r.into_iter().map(phi).collect())
        .collect();
    let k: Vec<Vec<f64>> = project(x, store.get(p.w_k))
        .into_iter()
        .map(|r| r.into_iter().map(phi).collect())
        .collect();
    let v = project(x, store.get(p.w_v));
    let n = q.len();
    let c = v[0].len();
    (0..n)
        .map(|i| {
            let mut num = vec![0.0; c];
            let mut den = DENOMINATOR_EPS;
            for j in 0..n {
                let s: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                den += s;
                for (o, vv) in num.iter_mut().zip(&v[j]) {
                    *o += s * vv;
                }
            }
            num.into_iter().map(|o| o / den).collect()
        })
        .collect()
}

fn softmax_direct(
    x: &Tensor,
    store: &ParamStore,
    p: &AttentionParams,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let q = project(x, store.get(p.w_q));
    let k = project(x, store.get(p.w_k));
    let v = project(x, store.get(p.w_v));
    let n = q.len();
    let scale = 1.0 / (p.dim as f64).sqrt();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / z).collect();
        let row = (0..v[0].len())
            .map(|c| (0..n).map(|j| a[j] * v[j][c]).sum())
            .collect();
        weights.push(a);
        out.push(row);
    }
    (weights, out)
}

fn max_diff(t: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    let cols = t.shape()[1];
    oracle
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &o)| (i * cols + j, o)))
        .map(|(idx, o)| (t.data()[idx] as f64 - o).abs())
        .fold(0.0, f64::max)
}

fn tokens(n: usize, c: usize, seed: u64) -> Tensor {
    uniform(&[n, c], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn linear_attention_matches_double_loop() {
    for &n in &[1usize, 2, 8, 32, 64] {
        let (store, p) = params(8, 4, None, n as u64);
        let x = tokens(n, 8, 100 + n as u64);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = linear_attention(&mut tape, &b, xv, &p).unwrap();
        let err = max_diff(tape.value(z), &linear_double_loop(&x, &store, &p));
        assert!(err < 1e-5, "N={n}: {err}");
    }
}

#[test]
fn identical_keys_average_values() {
    let (store, p) = params(6, 3, None, 9);
    let row = [0.4f32, -1.2, 0.7, 0.1, 1.5, -0.3];
    let x = Tensor::from_fn(&[5, 6], |i| row[i % 6]);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x);
    let la = linear_attention(&mut tape, &b, xv, &p).unwrap();
    let sa = softmax_attention(&mut tape, &b, xv, &p).unwrap();
    let v = tape.matmul(xv, b[p.w_v]).unwrap();
    let mean_v = tape.value(v).index_leading(0).unwrap();
    for i in 0..5 {
        for out in [tape.value(la), tape.value(sa.out)] {
            let r = out.index_leading(i).unwrap();
            assert!(r.max_abs_diff(&mean_v) < 1e-5);
        }
    }
}

#[test]
fn identical_keys_with_varying_values() {
    // W_K zeroed makes every key identical while values still differ
    let (mut store, p) = params(6, 3, None, 4);
    *store.get_mut(p.w_k) = Tensor::zeros(&[6, 3]);
    let x = tokens(7, 6, 21);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x);
    let la = linear_attention(&mut tape, &b, xv, &p).unwrap();
    let sa = softmax_attention(&mut tape, &b, xv, &p).unwrap();
    let v = tape.matmul(xv, b[p.w_v]).unwrap();
    let vals = tape.value(v);
    let mean: Vec<f32> = (0..6)
        .map(|c| (0..7).map(|i| vals.at(&[i, c])).sum::<f32>() / 7.0)
        .collect();
    for out in [tape.value(la), tape.value(sa.out)] {
        for i in 0..7 {
            for c in 0..6 {
                assert!((out.at(&[i, c]) - mean[c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn softmax_attention_matches_direct_formula() {
    let (store, p) = params(4, 2, None, 3);
    let x = tokens(6, 4, 33);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let a = softmax_attention(&mut tape, &b, xv, &p).unwrap();
    let (w, out) = softmax_direct(&x, &store, &p);
    assert!(max_diff(tape.value(a.out), &out) < 1e-5);
    assert!(max_diff(tape.value(a.weights), &w) < 1e-5);
}

#[test]
fn single_token_softmax_returns_value() {
    let (store, p) = params(4, 2, None, 8);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(tokens(1, 4, 1));
    let a = softmax_attention(&mut tape, &b, xv, &p).unwrap();
    let v = tape.matmul(xv, b[p.w_v]).unwrap();
    assert!(tape.value(a.out).max_abs_diff(tape.value(v)) < 1e-6);
}

#[test]
fn degenerate_reduction_equals_softmax_attention() {
    let (store, p) = params(6, 3, Some(1), 12);
    let p = p.with_identity_reduction();
    let grid = uniform(&[6, 4, 5], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let g = tape.constant(grid);
    let rsa = reduced_self_attention(&mut tape, &b, g, &p).unwrap();
    let x = lamformer_core::attention::grid_to_tokens(&mut tape, g).unwrap();
    let sa = softmax_attention(&mut tape, &b, x, &p).unwrap();
    assert!(tape.value(rsa.out).max_abs_diff(tape.value(sa.out)) < 1e-5);
}

#[test]
fn reduced_attention_rows_are_stochastic() {
    for (h, w, r) in [(8usize, 8usize, 2usize), (6, 10, 4), (5, 5, 3)] {
        let (store, p) = params(4, 2, Some(r), r as u64);
        let grid = uniform(
            &[4, h, w],
            -2.0,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(h as u64),
        );
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let g = tape.constant(grid);
        let a = reduced_self_attention(&mut tape, &b, g, &p).unwrap();
        let m = h.div_ceil(r) * w.div_ceil(r);
        let weights = tape.value(a.weights);
        assert_eq!(weights.shape(), &[h * w, m]);
        for row in weights.data().chunks(m) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn reduced_attention_mac_count_shrinks_with_ratio() {
    let mut last = u64::MAX;
    for r in [1usize, 2, 4, 8] {
        let (store, p) = params(8, 4, Some(r), 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let g = tape.constant(Tensor::zeros(&[8, 16, 16]));
        let before = tape.mac_count();
        reduced_self_attention(&mut tape, &b, g, &p).unwrap();
        let macs = tape.mac_count() - before;
        assert!(macs < last, "R={r}: {macs} !< {last}");
        last = macs;
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (store, p) = params(6, 3, None, 17);
    let x = tokens(5, 6, 71);
    let mut tensors = store.cast::<f64>().tensors().to_vec();
    tensors.push(x.cast());
    for softmax in [false, true] {
        let report = gradcheck::check(&mut tensors, 30, 5, |tape, v| {
            let xv = v[3];
            let bound = lamformer_core::params::Bound::from_vars(v[..3].to_vec());
            if softmax {
                Ok(softmax_attention(tape, &bound, xv, &p)?.out)
            } else {
                linear_attention(tape, &bound, xv, &p)
            }
        })
        .unwrap();
        assert!(report.passes(1e-4), "softmax={softmax}: {report:?}");
    }
}

#[test]
fn reduced_attention_gradients_match_finite_differences() {
    let (store, p) = params(4, 2, Some(2), 23);
    let grid = uniform(&[4, 4, 4], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(4));
    let n = store.len();
    let mut tensors = store.cast::<f64>().tensors().to_vec();
    tensors.push(grid.cast());
    let report = gradcheck::check(&mut tensors, 40, 6, |tape, v| {
        let bound = lamformer_core::params::Bound::from_vars(v[..n].to_vec());
        Ok(reduced_self_attention(tape, &bound, v[n], &p)?.out)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_attention_is_permutation_equivariant(n in 2usize..10, seed in 0u64..1000) {
        let (store, p) = params(4, 2, None, seed);
        let x = tokens(n, 4, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let xp = Tensor::from_fn(&[n, 4], |i| x.at(&[perm[i / 4], i % 4]));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x);
        let xpv = tape.constant(xp);
        let y = softmax_attention(&mut tape, &b, xv, &p).unwrap().out;
        let yp = softmax_attention(&mut tape, &b, xpv, &p).unwrap().out;
        for i in 0..n {
            for c in 0..4 {
                prop_assert!((tape.value(yp).at(&[i, c]) - tape.value(y).at(&[perm[i], c])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_attention_reordering_holds(n in 1usize..=64, seed in 0u64..1000) {
        let (store, p) = params(6, 3, None, seed);
        let x = tokens(n, 6, seed + 7);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = linear_attention(&mut tape, &b, xv, &p).unwrap();
        prop_assert!(max_diff(tape.value(z), &linear_double_loop(&x, &store, &p)) < 1e-5);
    }
}
