//! Combined Dice and cross-entropy training loss over class logits.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{LabelMap, Tensor};

/// Smoothing term in the Dice ratio and inside the logarithm.
pub const LOSS_EPS: f64 = 1e-5;
/// Default weight of the Dice term.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval<T = f32> {
    pub value: f64,
    pub dice: f64,
    pub cross_entropy: f64,
    pub grad: Vec<T>,
}

fn check_inputs(
    shape: &[usize],
    labels: &[LabelMap],
    lambda: f64,
) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(dim_err!(
            "loss expects B x K x H x W logits, got {:?}",
            shape
        ));
    }
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != b {
        return Err(dim_err!("{} label maps for a batch of {}", labels.len(), b));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(alloc::format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    for (i, l) in labels.iter().enumerate() {
        if l.height() != h || l.width() != w {
            return Err(dim_err!(
                "label map {} is {}x{}, logits are {}x{}",
                i,
                l.height(),
                l.width(),
                h,
                w
            ));
        }
        if let Some(p) = l.labels().iter().position(|&v| v as usize >= k) {
            return Err(Error::Data(alloc::format!(
                "label {} at sample {} pixel {} is outside [0, {})",
                l.labels()[p],
                i,
                p,
                k
            )));
        }
    }
    Ok((b, k, h * w))
}

/// `λ·(1 − mean_i dice_i) + (1 − λ)·CE` with `P = softmax` over the class axis,
/// `dice_i = (2ΣYP + ε)/(ΣY + ΣP² + ε)` summed over the whole batch and
/// `CE = −mean Σ_i Y log(P + ε)`.
pub fn combined_loss_eval<T: Real>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
    lambda: f64,
) -> Result<LossEval<T>> {
    let (b, k, hw) = check_inputs(logits.shape(), labels, lambda)?;
    let data = logits.data();
    let m = (b * hw) as f64;

    // class probabilities, laid out like the logits
    let mut prob = vec![0.0f64; data.len()];
    for bi in 0..b {
        let base = bi * k * hw;
        for px in 0..hw {
            let at = |c: usize| base + c * hw + px;
            let mx = (0..k)
                .map(|c| data[at(c)].wide())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..k {
                let e = libm::exp(data[at(c)].wide() - mx);
                prob[at(c)] = e;
                sum += e;
            }
            for c in 0..k {
                prob[at(c)] /= sum;
            }
        }
    }

    let mut inter = vec![0.0f64; k];
    let mut y_sum = vec![0.0f64; k];
    let mut p_sq = vec![0.0f64; k];
    let mut ce = 0.0f64;
    for (bi, lab) in labels.iter().enumerate() {
        let base = bi * k * hw;
        for (px, &l) in lab.labels().iter().enumerate() {
            let l = l as usize;
            for c in 0..k {
                let p = prob[base + c * hw + px];
                p_sq[c] += p * p;
            }
            let p = prob[base + l * hw + px];
            inter[l] += p;
            y_sum[l] += 1.0;
            ce -= libm::log(p + LOSS_EPS);
        }
    }
    ce /= m;
    let den: Vec<f64> = (0..k).map(|c| y_sum[c] + p_sq[c] + LOSS_EPS).collect();
    let num: Vec<f64> = (0..k).map(|c| 2.0 * inter[c] + LOSS_EPS).collect();
    let dice = (0..k).map(|c| num[c] / den[c]).sum::<f64>() / k as f64;
    let value = lambda * (1.0 - dice) + (1.0 - lambda) * ce;

    let mut grad = vec![T::zero(); data.len()];
    let mut g = vec![0.0f64; k];
    for (bi, lab) in labels.iter().enumerate() {
        let base = bi * k * hw;
        for (px, &l) in lab.labels().iter().enumerate() {
            let l = l as usize;
            // dL/dP per class
            for (c, gc) in g.iter_mut().enumerate() {
                let p = prob[base + c * hw + px];
                let y = if c == l { 1.0 } else { 0.0 };
                let ddice = (2.0 * y * den[c] - num[c] * 2.0 * p) / (den[c] * den[c]);
                *gc = -lambda / k as f64 * ddice;
                if c == l {
                    *gc -= (1.0 - lambda) / m / (p + LOSS_EPS);
                }
            }
            let dot: f64 = (0..k).map(|c| prob[base + c * hw + px] * g[c]).sum();
            for c in 0..k {
                let p = prob[base + c * hw + px];
                grad[base + c * hw + px] = T::of(p * (g[c] - dot));
            }
        }
    }
    Ok(LossEval {
        value,
        dice,
        cross_entropy: ce,
        grad,
    })
}

/// [`combined_loss_eval`] recorded on the tape as a scalar node.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    labels: &[LabelMap],
    lambda: f64,
) -> Result<Var> {
    let eval = combined_loss_eval(tape.value(logits), labels, lambda)?;
    tape.fused_scalar(logits, eval.value, eval.grad)
}
