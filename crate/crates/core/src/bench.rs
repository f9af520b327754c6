//! Cost model of the three attention kernels and log-log scaling fits.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    linear_attention, reduced_self_attention, softmax_attention, tokens_to_grid, AttentionParams,
};
use crate::error::{cfg_err, Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Sa,
    Rsa,
    La,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sa, Variant::Rsa, Variant::La];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sa => "SA",
            Variant::Rsa => "RSA",
            Variant::La => "LA",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SA" => Ok(Variant::Sa),
            "RSA" => Ok(Variant::Rsa),
            "LA" => Ok(Variant::La),
            _ => Err(cfg_err!(
                "unknown attention variant {s:?}; expected SA, RSA or LA"
            )),
        }
    }
}

/// Most-square `h × w` factorization of `n` with `h ≤ w`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut h = libm::sqrt(n as f64) as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

/// Multiply-accumulates of one kernel call on `n` tokens of width `c` with
/// query/key width `d`; `ratio` only affects RSA, whose tokens tile `grid_for(n)`.
pub fn closed_form_macs(variant: Variant, n: usize, c: usize, d: usize, ratio: usize) -> u64 {
    let (n, c, d) = (n as u64, c as u64, d as u64);
    let projections = n * c * (2 * d + c);
    match variant {
        Variant::Sa => n * n * (d + c) + projections,
        Variant::La => projections + 2 * n * d * c + n * d,
        Variant::Rsa => {
            let (h, w) = grid_for(n as usize);
            let m = (h.div_ceil(ratio) * w.div_ceil(ratio)) as u64;
            let r = ratio as u64;
            c * c * r * r * m + n * c * d + m * c * (d + c) + n * m * (d + c)
        }
    }
}

/// Parameters and a token matrix for benchmarking one kernel.
pub struct KernelSetup {
    pub variant: Variant,
    pub params: ParamStore,
    pub attn: AttentionParams,
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl KernelSetup {
    pub fn new(
        variant: Variant,
        n: usize,
        c: usize,
        d: usize,
        ratio: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let attn = match variant {
            Variant::Rsa => AttentionParams::init_reduced(&mut b, c, d, ratio),
            _ => AttentionParams::init(&mut b, c, d),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let tokens = crate::gradcheck::uniform(&[n, c], -1.0, 1.0, &mut rng);
        Ok(Self {
            variant,
            params,
            attn,
            tokens,
            grid: grid_for(n),
        })
    }

    /// One forward pass; returns `(mac_count, value_bytes)` of the tape.
    pub fn run(&self) -> Result<(u64, usize)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(self.tokens.clone());
        let before = tape.value_bytes();
        match self.variant {
            Variant::La => {
                linear_attention(&mut tape, &p, x, &self.attn)?;
            }
            Variant::Sa => {
                softmax_attention(&mut tape, &p, x, &self.attn)?;
            }
            Variant::Rsa => {
                let g = tokens_to_grid(&mut tape, x, self.grid)?;
                reduced_self_attention(&mut tape, &p, g, &self.attn)?;
            }
        }
        Ok((tape.mac_count(), tape.value_bytes() - before))
    }
}

/// Least-squares line through `(ln n, ln t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    pub exponent: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Fit `t ≈ a·n^k`. Needs at least four distinct lengths spanning a factor of eight.
pub fn fit_exponent(points: &[(usize, f64)]) -> Result<ExponentFit> {
    let mut lengths: Vec<usize> = points.iter().map(|p| p.0).collect();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 4 || lengths[0] == 0 || lengths[lengths.len() - 1] < 8 * lengths[0] {
        return Err(cfg_err!(
            "exponent fit needs >= 4 distinct lengths spanning >= 8x, got {:?}",
            lengths
        ));
    }
    if points.iter().any(|p| !(p.1 > 0.0)) {
        return Err(cfg_err!("exponent fit needs positive measurements"));
    }
    let xs: Vec<f64> = points.iter().map(|p| libm::log(p.0 as f64)).collect();
    let ys: Vec<f64> = points.iter().map(|p| libm::log(p.1)).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - exponent * x;
            r * r
        })
        .sum();
    Ok(ExponentFit {
        exponent,
        intercept,
        residual: libm::sqrt(sse / n),
    })
}
