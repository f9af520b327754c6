//! Segmentation metrics over integer label maps: Dice, HD95, recall and precision.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::{LabelMap, Tensor};

fn counts(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<(usize, usize, usize)> {
    pred.ensure_same_shape(gt)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == class_id, g == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// `2|X∩Y| / (|X| + |Y|)`; 1.0 when both masks are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    let (tp, fp, fn_) = counts(pred, gt, class_id)?;
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    })
}

/// `TP / (TP + FN)`; `None` when the ground truth has no pixel of the class.
pub fn recall(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    let (tp, _, fn_) = counts(pred, gt, class_id)?;
    Ok((tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64))
}

/// `TP / (TP + FP)`; `None` when the prediction has no pixel of the class.
pub fn precision(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    let (tp, fp, _) = counts(pred, gt, class_id)?;
    Ok((tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64))
}

/// Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside).
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let inside = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
            && mask[r as usize * width + c as usize]
    };
    (0..height * width)
        .map(|i| {
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            mask[i]
                && !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1))
        })
        .collect()
}

/// Stand-in for infinity that keeps the parabola intersections finite.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of sampled function `f`
/// (lower envelope of parabolas rooted at each sample).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |i: usize| f[i] + (i * i) as f64;
    for q in 1..f.len() {
        let mut s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0f64; height];
    let mut col_out = vec![0.0f64; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = grid[r * width + c];
        }
        dt_1d(&col, &mut col_out, &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0f64; width];
    for r in 0..height {
        let row = &grid[r * width..(r + 1) * width];
        dt_1d(row, &mut row_out, &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions, in pixels; `None` if either mask is empty.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    pred.ensure_same_shape(gt)?;
    let (h, w) = (gt.height(), gt.width());
    let bp = boundary(&pred.binary(class_id), h, w);
    let bg = boundary(&gt.binary(class_id), h, w);
    if !bp.iter().any(|&b| b) || !bg.iter().any(|&b| b) {
        return Ok(None);
    }
    let to_gt = squared_distance_transform(&bg, h, w);
    let to_pred = squared_distance_transform(&bp, h, w);
    let mut d: Vec<f64> = Vec::new();
    d.extend(
        bp.iter()
            .zip(&to_gt)
            .filter(|(b, _)| **b)
            .map(|(_, &s)| libm::sqrt(s)),
    );
    d.extend(
        bg.iter()
            .zip(&to_pred)
            .filter(|(b, _)| **b)
            .map(|(_, &s)| libm::sqrt(s)),
    );
    Ok(percentile(&mut d, 95.0))
}

/// Per-pixel argmax over the class axis of `K × H × W` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 3 || s[0] > 256 {
        return Err(dim_err!(
            "argmax expects K x H x W logits with K <= 256, got {:?}",
            s
        ));
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    let labels = (0..hw)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + px] > d[best * hw + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(s[1], s[2], labels)
}

/// Metrics of one class averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dsc: f64,
    /// `None` when undefined for every image.
    pub hd95: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Images whose HD95 was undefined and therefore excluded.
    pub hd95_undefined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_precision: Option<f64>,
    /// Classes whose HD95 was undefined on every image.
    pub hd95_undefined_classes: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    /// Per-image metrics for classes `1..K` (or `0..K` with background), each
    /// averaged over images, then averaged over classes.
    pub fn evaluate(
        preds: &[LabelMap],
        gts: &[LabelMap],
        num_classes: usize,
        include_background: bool,
    ) -> Result<Self> {
        if preds.len() != gts.len() || preds.is_empty() {
            return Err(dim_err!(
                "{} predictions for {} ground truths",
                preds.len(),
                gts.len()
            ));
        }
        let first = if include_background { 0 } else { 1 };
        let mut per_class = Vec::new();
        for c in first..num_classes {
            let c = c as u8;
            let (mut dsc, mut hd, mut rc, mut pr) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (p, g) in preds.iter().zip(gts) {
                dsc.push(Some(dice_score(p, g, c)?));
                hd.push(hd95(p, g, c)?);
                rc.push(recall(p, g, c)?);
                pr.push(precision(p, g, c)?);
            }
            per_class.push(ClassMetrics {
                class_id: c,
                dsc: mean_defined(dsc.into_iter()).unwrap_or(0.0),
                hd95_undefined: hd.iter().filter(|v| v.is_none()).count(),
                hd95: mean_defined(hd.into_iter()),
                recall: mean_defined(rc.into_iter()),
                precision: mean_defined(pr.into_iter()),
            });
        }
        let mean_dsc = mean_defined(per_class.iter().map(|m| Some(m.dsc))).unwrap_or(0.0);
        Ok(MetricReport {
            mean_hd95: mean_defined(per_class.iter().map(|m| m.hd95)),
            mean_recall: mean_defined(per_class.iter().map(|m| m.recall)),
            mean_precision: mean_defined(per_class.iter().map(|m| m.precision)),
            hd95_undefined_classes: per_class.iter().filter(|m| m.hd95.is_none()).count(),
            per_class,
            mean_dsc,
        })
    }

    pub fn class(&self, class_id: u8) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class_id == class_id)
    }
}
