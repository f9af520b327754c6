//! Single-head attention kernels over token matrices: linear attention,
//! softmax self-attention and reduced (spatially downsampled K/V) self-attention.

use crate::error::{cfg_err, dim_err, Result};
use crate::params::{Bound, Conv, LayerNorm, ParamBuilder, ParamId};
use crate::real::Real;
use crate::tape::{Activation, Padding, Tape, Var};

/// Added to the linear-attention normalizer.
pub const DENOMINATOR_EPS: f64 = 1e-6;

/// Spatial reduction of keys and values by a stride-`ratio` convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reduction {
    pub ratio: usize,
    /// `None` passes tokens through unchanged (only valid with `ratio == 1`).
    pub conv: Option<Conv>,
    /// Layer norms on the reduced keys and values; `None` bypasses both.
    pub norms: Option<(LayerNorm, LayerNorm)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    /// `C × d`
    pub w_q: ParamId,
    /// `C × d`
    pub w_k: ParamId,
    /// `C × C`
    pub w_v: ParamId,
    pub dim: usize,
    pub reduction: Option<Reduction>,
}

impl AttentionParams {
    /// Projections only, for linear or softmax attention.
    pub fn init(b: &mut ParamBuilder<'_>, channels: usize, dim: usize) -> Self {
        let w_q = b.projection("w_q", channels, dim);
        let w_k = b.projection("w_k", channels, dim);
        let w_v = b.projection("w_v", channels, channels);
        Self {
            w_q,
            w_k,
            w_v,
            dim,
            reduction: None,
        }
    }

    /// Projections plus the K/V reduction convolution and norms.
    pub fn init_reduced(
        b: &mut ParamBuilder<'_>,
        channels: usize,
        dim: usize,
        ratio: usize,
    ) -> Self {
        let mut p = Self::init(b, channels, dim);
        let conv = b.conv("reduce", channels, channels, ratio);
        let ln_k = b.layer_norm("ln_k", dim);
        let ln_v = b.layer_norm("ln_v", channels);
        p.reduction = Some(Reduction {
            ratio,
            conv: Some(conv),
            norms: Some((ln_k, ln_v)),
        });
        p
    }

    /// Replace the reduction by the identity with norms bypassed, which turns
    /// reduced attention into plain softmax attention.
    pub fn with_identity_reduction(mut self) -> Self {
        self.reduction = Some(Reduction {
            ratio: 1,
            conv: None,
            norms: None,
        });
        self
    }
}

/// Output of a softmax-based attention call.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    /// Row-stochastic `N × M` attention weights.
    pub weights: Var,
}

fn check_tokens<T: Real>(
    tape: &Tape<'_, T>,
    x: Var,
    p: &AttentionParams,
    bound: &Bound,
) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(dim_err!("attention expects N x C tokens, got {:?}", s));
    }
    let wq = tape.shape(bound[p.w_q]);
    if wq[0] != s[1] {
        return Err(dim_err!("tokens {:?} incompatible with W_Q {:?}", s, wq));
    }
    Ok((s[0], s[1]))
}

/// `Z_i = Q_i S / (Q_i zᵀ + ε)` with `S = Σ_j K_jᵀ V_j` and `z = Σ_j K_j`,
/// where `Q = φ(xW_Q)`, `K = φ(xW_K)`, `V = xW_V` and `φ(u) = elu(u) + 1`.
/// Cost is linear in the token count.
pub fn linear_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    x: Var,
    p: &AttentionParams,
) -> Result<Var> {
    check_tokens(tape, x, p, bound)?;
    let q = tape.matmul(x, bound[p.w_q])?;
    let q = tape.activation(q, Activation::EluPlusOne);
    let k = tape.matmul(x, bound[p.w_k])?;
    let k = tape.activation(k, Activation::EluPlusOne);
    let v = tape.matmul(x, bound[p.w_v])?;
    let kv = tape.matmul_t(k, v, true, false)?;
    let z = tape.sum_rows(k)?;
    let num = tape.matmul(q, kv)?;
    let den = tape.matmul_t(q, z, false, true)?;
    let den = tape.add_scalar(den, DENOMINATOR_EPS);
    tape.div_col(num, den)
}

fn softmax_core<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    dim: usize,
) -> Result<Attended> {
    let qs = tape.scale(q, 1.0 / libm::sqrt(dim as f64));
    let scores = tape.matmul_t(qs, k, false, true)?;
    let weights = tape.softmax(scores);
    let out = tape.matmul(weights, v)?;
    Ok(Attended { out, weights })
}

/// `y = softmax(QKᵀ/√d)·V` with `Q = xW_Q`, `K = xW_K`, `V = xW_V`.
pub fn softmax_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    x: Var,
    p: &AttentionParams,
) -> Result<Attended> {
    check_tokens(tape, x, p, bound)?;
    let q = tape.matmul(x, bound[p.w_q])?;
    let k = tape.matmul(x, bound[p.w_k])?;
    let v = tape.matmul(x, bound[p.w_v])?;
    softmax_core(tape, q, k, v, p.dim)
}

/// Grid `C × H × W` to tokens `(H·W) × C`.
pub fn grid_to_tokens<T: Real>(tape: &mut Tape<'_, T>, grid: Var) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("expected a C x H x W grid, got {:?}", s));
    }
    let flat = tape.reshape(grid, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Tokens `(H·W) × C` to grid `C × H × W`.
pub fn tokens_to_grid<T: Real>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    hw: (usize, usize),
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != hw.0 * hw.1 {
        return Err(dim_err!(
            "{:?} tokens do not tile a {}x{} grid",
            s,
            hw.0,
            hw.1
        ));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[s[1], hw.0, hw.1])
}

/// Softmax attention over all `H·W` queries with keys and values taken from a
/// stride-`R` convolution of the grid: `K̃ = LN(reshape(Conv(x))W_K)`,
/// `Ṽ = LN(reshape(Conv(x))W_V)`. Returns `N × C` outputs.
pub fn reduced_self_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    grid: Var,
    p: &AttentionParams,
) -> Result<Attended> {
    let red = p
        .reduction
        .ok_or_else(|| cfg_err!("reduced attention requires reduction parameters"))?;
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("reduced attention expects C x H x W, got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    if red.ratio == 0 || red.ratio > h.min(w) {
        return Err(cfg_err!(
            "reduction ratio {} invalid for a {}x{} grid",
            red.ratio,
            h,
            w
        ));
    }
    let tokens = grid_to_tokens(tape, grid)?;
    check_tokens(tape, tokens, p, bound)?;
    let reduced = match red.conv {
        Some(conv) => {
            let c = tape.conv2d(grid, bound[conv.weight], red.ratio, Padding::Same)?;
            let c = tape.add_col(c, bound[conv.bias])?;
            grid_to_tokens(tape, c)?
        }
        None if red.ratio == 1 => tokens,
        None => {
            return Err(cfg_err!(
                "identity reduction requires ratio 1, got {}",
                red.ratio
            ))
        }
    };
    let q = tape.matmul(tokens, bound[p.w_q])?;
    let mut k = tape.matmul(reduced, bound[p.w_k])?;
    let mut v = tape.matmul(reduced, bound[p.w_v])?;
    if let Some((ln_k, ln_v)) = red.norms {
        k = ln_k.forward(tape, bound, k)?;
        v = ln_v.forward(tape, bound, v)?;
    }
    softmax_core(tape, q, k, v, p.dim)
}
