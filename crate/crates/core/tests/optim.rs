use lamformer_core::optim::{adamw_step, OptimState};
use lamformer_core::{Error, ParamStore, Tensor};
use proptest::prelude::*;

fn store(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
    s
}

#[test]
fn zero_gradient_without_decay_leaves_weights() {
    let mut p = store(&[1.0, -2.0, 3.0]);
    let mut st = OptimState::new(&p, 0.1).with_weight_decay(0.0);
    adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
    assert_eq!(p.tensors()[0].data(), &[1.0, -2.0, 3.0]);
    assert_eq!(st.step, 1);
}

#[test]
fn decay_alone_shrinks_weights_by_lr_times_wd() {
    let mut p = store(&[1.0, -2.0]);
    let mut st = OptimState::new(&p, 0.1).with_weight_decay(0.5);
    adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap();
    let w = p.tensors()[0].data();
    assert!(
        (w[0] - 0.95).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7,
        "{w:?}"
    );
}

#[test]
fn first_step_moves_by_lr_against_the_gradient_sign() {
    let mut p = store(&[0.0, 0.0]);
    let mut st = OptimState::new(&p, 0.01).with_weight_decay(0.0);
    adamw_step(
        &mut p,
        &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()],
        &mut st,
    )
    .unwrap();
    let w = p.tensors()[0].data();
    assert!(
        (w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6,
        "{w:?}"
    );
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let mut p = store(&[0.5, 0.25]);
    let mut st = OptimState::new(&p, 0.0);
    adamw_step(
        &mut p,
        &[Tensor::new(&[2], vec![1.0, 1.0]).unwrap()],
        &mut st,
    )
    .unwrap();
    assert_eq!(p.tensors()[0].data(), &[0.5, 0.25]);
}

#[test]
fn converges_on_a_quadratic() {
    let target = [3.0f32, -1.0, 0.5];
    let mut p = store(&[0.0, 0.0, 0.0]);
    let mut st = OptimState::new(&p, 0.05).with_weight_decay(0.0);
    for _ in 0..2000 {
        let g: Vec<f32> = p.tensors()[0]
            .data()
            .iter()
            .zip(&target)
            .map(|(w, t)| 2.0 * (w - t))
            .collect();
        adamw_step(&mut p, &[Tensor::new(&[3], g).unwrap()], &mut st).unwrap();
    }
    for (w, t) in p.tensors()[0].data().iter().zip(&target) {
        assert!((w - t).abs() < 1e-3, "{w} vs {t}");
    }
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = store(&[1.0]);
    let mut st = OptimState::new(&p, 0.1);
    match adamw_step(
        &mut p,
        &[Tensor::new(&[1], vec![f32::NAN]).unwrap()],
        &mut st,
    ) {
        Err(Error::Training(msg)) => assert!(msg.contains('w'), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(p.tensors()[0].data(), &[1.0]);
    assert_eq!(st.step, 0);
}

#[test]
fn mismatched_gradients_are_rejected() {
    let mut p = store(&[1.0, 2.0]);
    let mut st = OptimState::new(&p, 0.1);
    assert!(adamw_step(&mut p, &[], &mut st).is_err());
    assert!(adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st).is_err());
}

proptest! {
    #[test]
    fn step_size_is_bounded_by_learning_rate(g in prop::collection::vec(-100.0f32..100.0, 1..8), lr in 1e-4f64..0.1) {
        let n = g.len();
        let mut p = store(&vec![0.0; n]);
        let mut st = OptimState::new(&p, lr).with_weight_decay(0.0);
        adamw_step(&mut p, &[Tensor::new(&[n], g).unwrap()], &mut st).unwrap();
        for &w in p.tensors()[0].data() {
            prop_assert!((w as f64).abs() <= lr * 1.0001);
        }
    }
}

#[test]
fn scalar_quadratic_reaches_zero_in_200_steps() {
    let mut p = store(&[1.0]);
    let mut st = OptimState::new(&p, 0.1).with_weight_decay(0.0);
    for _ in 0..200 {
        let g = 2.0 * p.tensors()[0].data()[0];
        adamw_step(&mut p, &[Tensor::new(&[1], vec![g]).unwrap()], &mut st).unwrap();
    }
    let w = p.tensors()[0].data()[0];
    assert!(w.abs() < 1e-2, "{w}");
}

#[test]
fn decay_is_geometric_over_many_steps() {
    let mut p = store(&[2.0, -0.5]);
    let mut st = OptimState::new(&p, 0.1).with_weight_decay(0.2);
    for k in 1..=25 {
        adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap();
        let f = 0.98f64.powi(k);
        let w = p.tensors()[0].data();
        assert!(
            (w[0] as f64 - 2.0 * f).abs() < 1e-5 && (w[1] as f64 + 0.5 * f).abs() < 1e-5,
            "step {k}: {w:?}"
        );
    }
}
