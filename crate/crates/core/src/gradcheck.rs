//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step at single precision.
pub const FD_STEP: f64 = 1e-3;
/// Finite-difference step at double precision.
pub const FD_STEP_WIDE: f64 = 1e-6;

/// Step balancing truncation error against output rounding for `T`.
pub fn fd_step<T: Real>() -> f64 {
    if T::BYTES >= 8 {
        FD_STEP_WIDE
    } else {
        FD_STEP
    }
}
/// Pairs with `|analytic| + |numeric|` below this are not compared.
pub const FD_SKIP_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(parameter index, element index, analytic, numeric)` of the worst pair.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare analytic and numeric gradients of a scalar built from `params`.
///
/// `build` receives a fresh tape with every parameter bound (in order) and
/// returns an output variable of any shape; the checked objective is
/// `Σ r ⊙ output` with a fixed random projection `r ∈ [0.5, 1.5)`, evaluated in `f64`.
/// `samples` parameter elements are drawn uniformly over all scalars.
/// Run at `f64` for tight tolerances; `f32` rounding of the outputs limits the
/// resolvable difference to roughly `1e-4 · |output| / step`.
pub fn check<T: Real, F>(
    params: &mut [Tensor<T>],
    samples: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    check_with_step(params, samples, seed, fd_step::<T>(), build)
}

/// [`check`] with an explicit finite-difference step.
pub fn check_with_step<T: Real, F>(
    params: &mut [Tensor<T>],
    samples: usize,
    seed: u64,
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Usage("finite-difference step must be > 0".into()));
    }
    let total: usize = params.iter().map(Tensor::len).sum();
    if total == 0 || samples == 0 {
        return Err(Error::Usage(
            "gradient check needs parameters and samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (projection, analytic) = {
        let mut tape = Tape::default();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let projection = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(0.5..1.5)));
        let grads = tape.backward_seeded(out, &projection)?;
        let analytic: Vec<Option<Tensor<T>>> =
            vars.iter().map(|&v| grads.get(v).cloned()).collect();
        (projection, analytic)
    };

    let objective = |params: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::default();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(&o, &r)| o.wide() * r.wide())
            .sum())
    };

    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].len() {
            flat -= params[pi].len();
            pi += 1;
        }
        let original = params[pi].data()[flat];
        let step = T::of(step);
        let (hi, lo) = (original + step, original - step);
        params[pi].data_mut()[flat] = hi;
        let plus = objective(params)?;
        params[pi].data_mut()[flat] = lo;
        let minus = objective(params)?;
        params[pi].data_mut()[flat] = original;
        // divide by the step actually representable in T
        let numeric = (plus - minus) / (hi.wide() - lo.wide());
        let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[flat].wide());
        if a.abs() + numeric.abs() < FD_SKIP_BELOW {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let rel = relative_error(a, numeric);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((pi, flat, a, numeric));
        }
    }
    Ok(report)
}

/// Tensor of uniform values in `[lo, hi)` from a seeded stream.
pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
