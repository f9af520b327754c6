use lamformer_core::metrics::*;
use lamformer_core::{LabelMap, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(h: usize, w: usize, k: u8, density: f64, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|_| {
                if rng.gen_bool(density) {
                    rng.gen_range(1..k)
                } else {
                    0
                }
            })
            .collect(),
    )
    .unwrap()
}

fn blocky_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0);
    for _ in 0..rng.gen_range(0..4) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, cw) = (rng.gen_range(1..h / 2), rng.gen_range(1..w / 2));
        let label = rng.gen_range(1..3);
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + cw).min(w) {
                m.set(r, c, label);
            }
        }
    }
    m
}

fn brute_counts(p: &LabelMap, g: &LabelMap, c: u8) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..p.labels().len() {
        let (a, b) = (p.labels()[i] == c, g.labels()[i] == c);
        tp += usize::from(a && b);
        fp += usize::from(a && !b);
        fn_ += usize::from(!a && b);
    }
    (tp, fp, fn_)
}

fn brute_boundary(m: &LabelMap, c: u8) -> Vec<(f64, f64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let is = |r: i64, col: i64| {
        r >= 0 && col >= 0 && r < h && col < w && m.get(r as usize, col as usize) == c
    };
    let mut out = Vec::new();
    for r in 0..h {
        for col in 0..w {
            if is(r, col)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dr, dc)| !is(r + dr, col + dc))
            {
                out.push((r as f64, col as f64));
            }
        }
    }
    out
}

/// All-pairs nearest distances pooled both ways, then the interpolated 95th percentile.
fn brute_hd95(p: &LabelMap, g: &LabelMap, c: u8) -> Option<f64> {
    let (bp, bg) = (brute_boundary(p, c), brute_boundary(g, c));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let nearest = |a: &[(f64, f64)], b: &[(f64, f64)]| -> Vec<f64> {
        a.iter()
            .map(|x| {
                b.iter()
                    .map(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = nearest(&bp, &bg);
    d.extend(nearest(&bg, &bp));
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    Some(d[lo] + (d[hi] - d[lo]) * (pos - lo as f64))
}

#[test]
fn metrics_match_brute_force_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..200 {
        let (p, g) = if i % 2 == 0 {
            (
                random_map(32, 32, 3, 0.3, &mut rng),
                random_map(32, 32, 3, 0.3, &mut rng),
            )
        } else {
            (blocky_map(32, 32, &mut rng), blocky_map(32, 32, &mut rng))
        };
        for c in 0..3u8 {
            let (tp, fp, fn_) = brute_counts(&p, &g, c);
            let dsc = if tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            assert_eq!(dice_score(&p, &g, c).unwrap(), dsc);
            assert_eq!(
                recall(&p, &g, c).unwrap(),
                (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
            );
            assert_eq!(
                precision(&p, &g, c).unwrap(),
                (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
            );
            match (hd95(&p, &g, c).unwrap(), brute_hd95(&p, &g, c)) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-6, "pair {i} class {c}: {a} vs {b}")
                }
                (a, b) => assert_eq!(a, b, "pair {i} class {c}"),
            }
        }
    }
}

#[test]
fn distance_transform_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let sites: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.1)).collect();
        if !sites.iter().any(|&s| s) {
            continue;
        }
        let dt = squared_distance_transform(&sites, h, w);
        for i in 0..h * w {
            let want = (0..h * w)
                .filter(|&j| sites[j])
                .map(|j| {
                    let (dr, dc) = (
                        (i / w) as f64 - (j / w) as f64,
                        (i % w) as f64 - (j % w) as f64,
                    );
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(dt[i], want);
        }
    }
}

#[test]
fn hand_computed_cases() {
    // 4x4 square vs the same square shifted right by one column
    let square = |shift: usize| {
        let mut m = LabelMap::filled(8, 8, 0);
        for r in 2..6 {
            for c in 2 + shift..6 + shift {
                m.set(r, c, 1);
            }
        }
        m
    };
    let (a, b) = (square(0), square(1));
    assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.75);
    assert_eq!(recall(&a, &b, 1).unwrap(), Some(0.75));
    assert_eq!(precision(&a, &b, 1).unwrap(), Some(0.75));
    assert_eq!(hd95(&a, &b, 1).unwrap(), Some(1.0));
    assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));

    let empty = LabelMap::filled(8, 8, 0);
    assert_eq!(dice_score(&empty, &empty, 1).unwrap(), 1.0);
    assert_eq!(dice_score(&a, &empty, 1).unwrap(), 0.0);
    assert_eq!(hd95(&a, &empty, 1).unwrap(), None);
    assert_eq!(recall(&a, &empty, 1).unwrap(), None);
    assert_eq!(precision(&empty, &a, 1).unwrap(), None);
}

#[test]
fn boundary_treats_the_image_edge_as_outside() {
    let full = vec![true; 9];
    let b = boundary(&full, 3, 3);
    assert_eq!(
        b,
        vec![true, true, true, true, false, true, true, true, true]
    );
}

#[test]
fn percentile_interpolates() {
    let mut v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
    assert_eq!(percentile(&mut v, 0.0), Some(1.0));
    assert_eq!(percentile(&mut v, 100.0), Some(5.0));
    assert_eq!(percentile(&mut v, 50.0), Some(3.0));
    assert!((percentile(&mut v, 95.0).unwrap() - 4.8).abs() < 1e-12);
    assert_eq!(percentile(&mut [], 95.0), None);
}

#[test]
fn perfect_predictions_give_perfect_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gts: Vec<LabelMap> = (0..5).map(|_| blocky_map(16, 16, &mut rng)).collect();
    let r = MetricReport::evaluate(&gts, &gts, 3, false).unwrap();
    assert_eq!(r.mean_dsc, 1.0);
    assert!(r
        .per_class
        .iter()
        .all(|m| m.dsc == 1.0 && m.hd95.is_none_or(|h| h == 0.0)));
    assert!(r.mean_recall.is_none_or(|x| x == 1.0));
    assert!(r.mean_precision.is_none_or(|x| x == 1.0));
    assert!(r.mean_hd95.is_none_or(|x| x == 0.0));
    assert_eq!(
        r.per_class.iter().map(|m| m.class_id).collect::<Vec<_>>(),
        vec![1, 2]
    );
    let with_bg = MetricReport::evaluate(&gts, &gts, 3, true).unwrap();
    assert_eq!(with_bg.per_class.len(), 3);
}

#[test]
fn report_averages_per_image_then_over_classes() {
    let g = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
    let p1 = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
    let p2 = LabelMap::new(2, 2, vec![1, 0, 0, 0]).unwrap();
    let r = MetricReport::evaluate(&[p1, p2], &[g.clone(), g], 3, false).unwrap();
    let c1 = r.class(1).unwrap();
    let c2 = r.class(2).unwrap();
    assert!((c1.dsc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((c2.dsc - 0.5).abs() < 1e-12);
    assert_eq!(c2.precision, Some(1.0));
    assert_eq!(c2.hd95_undefined, 1);
    assert!((r.mean_dsc - (c1.dsc + c2.dsc) / 2.0).abs() < 1e-12);
}

#[test]
fn argmax_picks_the_largest_logit() {
    let t = Tensor::new(&[3, 1, 2], vec![0.0, 5.0, 1.0, 0.0, 2.0, -1.0]).unwrap();
    assert_eq!(argmax_labels(&t).unwrap().labels(), &[2, 0]);
    assert!(argmax_labels(&Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = LabelMap::filled(4, 4, 0);
    let b = LabelMap::filled(4, 5, 0);
    assert!(dice_score(&a, &b, 0).is_err());
    assert!(hd95(&a, &b, 0).is_err());
    assert!(MetricReport::evaluate(std::slice::from_ref(&a), &[], 2, false).is_err());
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_symmetric(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_map(12, 12, 3, 0.4, &mut rng);
        let g = random_map(12, 12, 3, 0.4, &mut rng);
        for c in 0..3u8 {
            let d = dice_score(&p, &g, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice_score(&g, &p, c).unwrap());
            prop_assert_eq!(hd95(&p, &g, c).unwrap(), hd95(&g, &p, c).unwrap());
            if let Some(h) = hd95(&p, &g, c).unwrap() {
                prop_assert!(h >= 0.0);
            }
            prop_assert_eq!(recall(&p, &g, c).unwrap(), precision(&g, &p, c).unwrap());
        }
    }
}
