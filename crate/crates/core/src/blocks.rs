//! Encoder and decoder building blocks plus the patch layers that move between
//! pyramid levels. Blocks take `N × C` tokens with the grid size `(H, W)`
//! alongside and return tokens of the same shape.

use alloc::vec::Vec;

use crate::attention::{
    grid_to_tokens, linear_attention, reduced_self_attention, tokens_to_grid, AttentionParams,
};
use crate::error::{cfg_err, dim_err, Result};
use crate::params::{Bound, Conv, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::real::Real;
use crate::tape::{Padding, PoolKind, Tape, Var};

/// Hidden width multiplier of the feed-forward sublayers.
pub const FFN_EXPANSION: usize = 4;
/// Depthwise kernel size in LRLA and FRN.
pub const DEPTHWISE_KERNEL: usize = 3;

/// Rearrange `C × H × W` into `(C·r²) × H/r × W/r`; channel `c·r² + i·r + j`
/// holds pixel `(y·r + i, x·r + j)` of channel `c`.
pub fn pixel_unshuffle<T: Real>(tape: &mut Tape<'_, T>, grid: Var, r: usize) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(r) || !s[2].is_multiple_of(r) {
        return Err(dim_err!("cannot unshuffle {:?} by {}", s, r));
    }
    let (c, h, w) = (s[0], s[1] / r, s[2] / r);
    let x = tape.reshape(grid, &[c, h, r, w, r])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3])?;
    tape.reshape(x, &[c * r * r, h, w])
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(tape: &mut Tape<'_, T>, grid: Var, r: usize) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(r * r) {
        return Err(dim_err!("cannot shuffle {:?} by {}", s, r));
    }
    let (c, h, w) = (s[0] / (r * r), s[1], s[2]);
    let x = tape.reshape(grid, &[c, r, r, h, w])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2])?;
    tape.reshape(x, &[c, h * r, w * r])
}

/// Depthwise `k × k` kernel bank with a per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn init(b: &mut ParamBuilder<'_>, name: &str, c: usize) -> Self {
        let weight = b.depthwise(&alloc::format!("{name}.weight"), c, DEPTHWISE_KERNEL);
        let bias = b.add(&alloc::format!("{name}.bias"), crate::Tensor::zeros(&[c]));
        Self { weight, bias }
    }

    /// Apply to tokens viewed as a grid; returns tokens.
    pub fn forward_tokens<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<Var> {
        let g = tokens_to_grid(tape, x, hw)?;
        let g = tape.depthwise_conv2d(g, p[self.weight])?;
        let g = tape.add_col(g, p[self.bias])?;
        grid_to_tokens(tape, g)
    }
}

/// Forward Residual Network. `depth` 3 is the full three-stage form; 2 drops
/// the middle stage; 1 keeps only the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrnParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dconv: DepthwiseConv,
    pub ln1: LayerNorm,
    pub ln2: Option<LayerNorm>,
    pub ln3: Option<LayerNorm>,
    pub depth: usize,
}

impl FrnParams {
    pub fn init(b: &mut ParamBuilder<'_>, c: usize, depth: usize) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(cfg_err!("FRN depth must be 1, 2 or 3, got {}", depth));
        }
        let hidden = FFN_EXPANSION * c;
        let fc1 = b.linear("fc1", c, hidden, true);
        let dconv = DepthwiseConv::init(b, "dconv", hidden);
        let ln1 = b.layer_norm("ln1", hidden);
        let ln2 = (depth == 3).then(|| b.layer_norm("ln2", hidden));
        let ln3 = (depth >= 2).then(|| b.layer_norm("ln3", hidden));
        let fc2 = b.linear("fc2", hidden, c, true);
        Ok(Self {
            fc1,
            fc2,
            dconv,
            ln1,
            ln2,
            ln3,
            depth,
        })
    }
}

/// ```text
/// f1 = LN1(DConv(FC1 x) + FC1 x)
/// f2 = LN2(f1 + FC1 x)
/// f3 = FC2(GELU(LN3(f2 + FC1 x)))
/// ```
pub fn frn_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    f: &FrnParams,
    hw: (usize, usize),
) -> Result<Var> {
    let h = f.fc1.forward(tape, p, x)?;
    let conv = f.dconv.forward_tokens(tape, p, h, hw)?;
    let s = tape.add(conv, h)?;
    let mut acc = f.ln1.forward(tape, p, s)?;
    if let Some(ln2) = f.ln2 {
        let s = tape.add(acc, h)?;
        acc = ln2.forward(tape, p, s)?;
    }
    if let Some(ln3) = f.ln3 {
        let s = tape.add(acc, h)?;
        acc = ln3.forward(tape, p, s)?;
    }
    let a = tape.gelu(acc);
    f.fc2.forward(tape, p, a)
}

/// Feed-forward sublayer: the FRN or a plain two-layer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ffn {
    Frn(FrnParams),
    Mlp { fc1: Linear, fc2: Linear },
}

impl Ffn {
    /// `depth` 0 selects the MLP.
    pub fn init(b: &mut ParamBuilder<'_>, c: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            let hidden = FFN_EXPANSION * c;
            let fc1 = b.linear("fc1", c, hidden, true);
            let fc2 = b.linear("fc2", hidden, c, true);
            Ok(Ffn::Mlp { fc1, fc2 })
        } else {
            FrnParams::init(b, c, depth).map(Ffn::Frn)
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<Var> {
        match self {
            Ffn::Frn(f) => frn_forward(tape, p, x, f, hw),
            Ffn::Mlp { fc1, fc2 } => {
                let h = fc1.forward(tape, p, x)?;
                let h = tape.gelu(h);
                fc2.forward(tape, p, h)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LamBlockParams {
    pub ln_attn: LayerNorm,
    pub w1: Linear,
    pub dconv: DepthwiseConv,
    pub attn: AttentionParams,
    pub w2: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl LamBlockParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        c: usize,
        attn_dim: usize,
        ffn_depth: usize,
    ) -> Result<Self> {
        let ln_attn = b.layer_norm("ln_attn", c);
        let w1 = b.linear("w1", c, c, true);
        let dconv = DepthwiseConv::init(b, "dconv", c);
        let attn = AttentionParams::init(&mut b.scope("attn"), c, attn_dim);
        let w2 = b.linear("w2", c, c, true);
        let ln_ffn = b.layer_norm("ln_ffn", c);
        let ffn = Ffn::init(&mut b.scope("ffn"), c, ffn_depth)?;
        Ok(Self {
            ln_attn,
            w1,
            dconv,
            attn,
            w2,
            ln_ffn,
            ffn,
        })
    }
}

/// Output of a token-mixing block together with its inspectable attention map.
#[derive(Debug, Clone, Copy)]
pub struct BlockOut {
    pub out: Var,
    /// LRLA: the `N × C` gate `σ(W1 x)`. RT: the `N × M` softmax weights.
    pub attention: Var,
}

/// `W2(LA(σ(DConv(W1 x)))) ⊙ σ(W1 x)` with `σ` = SiLU.
pub fn lrla_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    lam: &LamBlockParams,
    hw: (usize, usize),
) -> Result<BlockOut> {
    let h = lam.w1.forward(tape, p, x)?;
    let conv = lam.dconv.forward_tokens(tape, p, h, hw)?;
    let main = tape.silu(conv);
    let main = linear_attention(tape, p, main, &lam.attn)?;
    let main = lam.w2.forward(tape, p, main)?;
    let gate = tape.silu(h);
    let out = tape.mul(main, gate)?;
    Ok(BlockOut {
        out,
        attention: gate,
    })
}

/// `y = x + LRLA(LN x)`, then `y + FFN(LN y)`.
pub fn lam_block_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    lam: &LamBlockParams,
    hw: (usize, usize),
) -> Result<BlockOut> {
    let n = lam.ln_attn.forward(tape, p, x)?;
    let mixed = lrla_forward(tape, p, n, lam, hw)?;
    let y = tape.add(x, mixed.out)?;
    let n = lam.ln_ffn.forward(tape, p, y)?;
    let f = lam.ffn.forward(tape, p, n, hw)?;
    Ok(BlockOut {
        out: tape.add(y, f)?,
        attention: mixed.attention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtBlockParams {
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl RtBlockParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        c: usize,
        attn_dim: usize,
        ratio: usize,
        ffn_depth: usize,
    ) -> Result<Self> {
        let ln_attn = b.layer_norm("ln_attn", c);
        let attn = AttentionParams::init_reduced(&mut b.scope("attn"), c, attn_dim, ratio);
        let ln_ffn = b.layer_norm("ln_ffn", c);
        let ffn = Ffn::init(&mut b.scope("ffn"), c, ffn_depth)?;
        Ok(Self {
            ln_attn,
            attn,
            ln_ffn,
            ffn,
        })
    }
}

/// `y = x + RSA(grid(LN x))`, then `y + FFN(LN y)`.
pub fn rt_block_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    rt: &RtBlockParams,
    hw: (usize, usize),
) -> Result<BlockOut> {
    let n = rt.ln_attn.forward(tape, p, x)?;
    let g = tokens_to_grid(tape, n, hw)?;
    let a = reduced_self_attention(tape, p, g, &rt.attn)?;
    let y = tape.add(x, a.out)?;
    let n = rt.ln_ffn.forward(tape, p, y)?;
    let f = rt.ffn.forward(tape, p, n, hw)?;
    Ok(BlockOut {
        out: tape.add(y, f)?,
        attention: a.weights,
    })
}

/// Plain convolutional block used when LAM or RT is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockParams {
    pub ln: LayerNorm,
    pub conv: Conv,
}

impl ConvBlockParams {
    pub fn init(b: &mut ParamBuilder<'_>, c: usize) -> Self {
        let ln = b.layer_norm("ln", c);
        let conv = b.conv("conv", c, c, 3);
        Self { ln, conv }
    }
}

/// `x + GELU(Conv3x3(LN x))`.
pub fn conv_block_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    blk: &ConvBlockParams,
    hw: (usize, usize),
) -> Result<Var> {
    let n = blk.ln.forward(tape, p, x)?;
    let g = tokens_to_grid(tape, n, hw)?;
    let g = tape.conv2d(g, p[blk.conv.weight], 1, Padding::Same)?;
    let g = tape.add_col(g, p[blk.conv.bias])?;
    let g = tape.gelu(g);
    let t = grid_to_tokens(tape, g)?;
    tape.add(x, t)
}

/// Channel gating shared across all encoder stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhfaParams {
    pub channels: Vec<usize>,
    /// `C̃ → C̃/4 → C̃`; `None` makes the MLP the identity.
    pub mlp: Option<(Linear, Linear)>,
}

impl PhfaParams {
    pub fn init(b: &mut ParamBuilder<'_>, channels: &[usize]) -> Self {
        let total: usize = channels.iter().sum();
        let hidden = (total / 4).max(1);
        let fc1 = b.linear("fc1", total, hidden, true);
        let fc2 = b.linear("fc2", hidden, total, true);
        Self {
            channels: channels.to_vec(),
            mlp: Some((fc1, fc2)),
        }
    }

    pub fn identity(channels: &[usize]) -> Self {
        Self {
            channels: channels.to_vec(),
            mlp: None,
        }
    }
}

/// Gated features and the per-stage gate vectors.
#[derive(Debug, Clone)]
pub struct PhfaOut {
    pub features: Vec<Var>,
    pub gates: Vec<Var>,
}

/// `V3 = Sigmoid(MLP(V1) + MLP(V2))` from concatenated max and average pools,
/// split back per stage and applied channel-wise. Features are `C_i × H_i × W_i` grids.
pub fn phfa_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    features: &[Var],
    ph: &PhfaParams,
) -> Result<PhfaOut> {
    if features.len() != 4 || ph.channels.len() != 4 {
        return Err(cfg_err!(
            "PHFA expects 4 stages, got {} features for {} configured",
            features.len(),
            ph.channels.len()
        ));
    }
    let mut maxes = Vec::with_capacity(4);
    let mut avgs = Vec::with_capacity(4);
    for (i, (&f, &c)) in features.iter().zip(&ph.channels).enumerate() {
        let s = tape.shape(f);
        if s.len() != 3 || s[0] != c {
            return Err(cfg_err!(
                "PHFA stage {} has shape {:?}, configured for {} channels",
                i + 1,
                s,
                c
            ));
        }
        let m = tape.global_pool(f, PoolKind::Max)?;
        maxes.push(tape.reshape(m, &[1, c])?);
        let a = tape.global_pool(f, PoolKind::Avg)?;
        avgs.push(tape.reshape(a, &[1, c])?);
    }
    let v1 = tape.concat(&maxes, 1)?;
    let v2 = tape.concat(&avgs, 1)?;
    let mlp = |tape: &mut Tape<'_, T>, v: Var| -> Result<Var> {
        match ph.mlp {
            Some((fc1, fc2)) => {
                let h = fc1.forward(tape, p, v)?;
                let h = tape.relu(h);
                fc2.forward(tape, p, h)
            }
            None => Ok(v),
        }
    };
    let m1 = mlp(tape, v1)?;
    let m2 = mlp(tape, v2)?;
    let s = tape.add(m1, m2)?;
    let v3 = tape.sigmoid(s);
    let gates = tape.split(v3, 1, &ph.channels)?;
    let mut out = Vec::with_capacity(4);
    for (&f, &g) in features.iter().zip(&gates) {
        out.push(tape.mul_col(f, g)?);
    }
    Ok(PhfaOut {
        features: out,
        gates,
    })
}

/// Non-overlapping 4×4 patch projection followed by a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub ln: LayerNorm,
}

/// Input sides must be multiples of this so the deepest stage is integral.
pub const SIZE_MULTIPLE: usize = 32;
pub const PATCH: usize = 4;

impl PatchEmbed {
    pub fn init(b: &mut ParamBuilder<'_>, img_channels: usize, c: usize) -> Self {
        let proj = b.linear("proj", img_channels * PATCH * PATCH, c, true);
        let ln = b.layer_norm("ln", c);
        Self { proj, ln }
    }
}

/// `C_img × H × W` image to `(H/4 · W/4) × C_1` tokens.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    img: Var,
    pe: &PatchEmbed,
) -> Result<Var> {
    let s = tape.shape(img).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("patch_embed expects C x H x W, got {:?}", s));
    }
    if !s[1].is_multiple_of(SIZE_MULTIPLE) || !s[2].is_multiple_of(SIZE_MULTIPLE) {
        return Err(cfg_err!(
            "image {}x{} is not a multiple of {} on both sides",
            s[1],
            s[2],
            SIZE_MULTIPLE
        ));
    }
    let g = pixel_unshuffle(tape, img, PATCH)?;
    let t = grid_to_tokens(tape, g)?;
    let t = pe.proj.forward(tape, p, t)?;
    pe.ln.forward(tape, p, t)
}

/// 2×2 neighborhood concatenation, norm, then `4C → 2C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchMerge {
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl PatchMerge {
    pub fn init(b: &mut ParamBuilder<'_>, c: usize) -> Self {
        let ln = b.layer_norm("ln", 4 * c);
        let proj = b.linear("proj", 4 * c, 2 * c, false);
        Self { ln, proj }
    }
}

pub fn patch_merge<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    pm: &PatchMerge,
    hw: (usize, usize),
) -> Result<Var> {
    if !hw.0.is_multiple_of(2) || !hw.1.is_multiple_of(2) {
        return Err(dim_err!(
            "patch_merge needs even grid sides, got {}x{}",
            hw.0,
            hw.1
        ));
    }
    let g = tokens_to_grid(tape, x, hw)?;
    let g = pixel_unshuffle(tape, g, 2)?;
    let t = grid_to_tokens(tape, g)?;
    let t = pm.ln.forward(tape, p, t)?;
    pm.proj.forward(tape, p, t)
}

/// `C → (C/2)·r²` projection, pixel shuffle by `r`, then a layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchExpand {
    pub proj: Linear,
    pub ln: LayerNorm,
    pub factor: usize,
    pub out_channels: usize,
}

impl PatchExpand {
    /// Upsample 2× and halve the channels.
    pub fn init(b: &mut ParamBuilder<'_>, c: usize) -> Self {
        let proj = b.linear("proj", c, 2 * c, false);
        let ln = b.layer_norm("ln", c / 2);
        Self {
            proj,
            ln,
            factor: 2,
            out_channels: c / 2,
        }
    }

    /// Upsample by `factor` keeping `c` channels.
    pub fn init_final(b: &mut ParamBuilder<'_>, c: usize, factor: usize) -> Self {
        let proj = b.linear("proj", c, c * factor * factor, false);
        let ln = b.layer_norm("ln", c);
        Self {
            proj,
            ln,
            factor,
            out_channels: c,
        }
    }
}

pub fn patch_expand<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    pe: &PatchExpand,
    hw: (usize, usize),
) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if pe.factor == 2 && c % 2 != 0 {
        return Err(dim_err!(
            "patch_expand needs an even channel count, got {}",
            c
        ));
    }
    let t = pe.proj.forward(tape, p, x)?;
    let g = tokens_to_grid(tape, t, hw)?;
    let g = pixel_shuffle(tape, g, pe.factor)?;
    let t = grid_to_tokens(tape, g)?;
    pe.ln.forward(tape, p, t)
}
