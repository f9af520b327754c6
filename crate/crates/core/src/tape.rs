//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value. Inputs always precede
//! the node that consumes them, so a single reverse sweep visits each node
//! exactly once. Parameters can be bound by reference, which keeps a forward
//! pass from copying the weights.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `c = √(2/π)`, the scale inside the tanh approximation of GELU.
pub const GELU_C: f64 = 0.797_884_560_8;
const GELU_CUBIC: f64 = 0.044_715;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Relu,
    /// `elu(x) + 1`, the positive feature map used by linear attention.
    EluPlusOne,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        let one = T::one();
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let u = T::of(GELU_C) * (x + T::of(GELU_CUBIC) * x * x * x);
                T::of(0.5) * x * (one + u.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(T::zero()),
            Activation::EluPlusOne => {
                if x > T::zero() {
                    x + one
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        let one = T::one();
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Activation::Gelu => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_CUBIC), T::of(0.5));
                let t = (c * (x + a * x * x * x)).tanh();
                half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x * x)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (one - s)
            }
            Activation::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Activation::EluPlusOne => {
                if x > T::zero() {
                    one
                } else {
                    x.exp()
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Output spatial size `ceil(H / stride)`, extra padding on the bottom/right.
    Same,
    /// Symmetric zero padding on every side.
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BroadcastKind {
    Add,
    Mul,
    Div,
}

impl BroadcastKind {
    #[inline(always)]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BroadcastKind::Add => a + b,
            BroadcastKind::Mul => a * b,
            BroadcastKind::Div => a / b,
        }
    }

    /// `(∂/∂a, ∂/∂b)` of [`Self::apply`].
    #[inline(always)]
    fn partials<T: Real>(self, a: T, b: T) -> (T, T) {
        match self {
            BroadcastKind::Add => (T::one(), T::one()),
            BroadcastKind::Mul => (b, a),
            BroadcastKind::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    /// `v` broadcast along the trailing axis (length = last dim).
    RowBroadcast {
        kind: BroadcastKind,
        x: Var,
        v: Var,
    },
    /// `v` broadcast along the leading axis (length = first dim).
    ColBroadcast {
        kind: BroadcastKind,
        x: Var,
        v: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
    },
    GlobalPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    /// Scalar output whose gradient with respect to `x` was computed in the forward pass.
    Fused {
        x: Var,
        local_grad: Vec<T>,
    },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations for one forward pass.
///
/// A tape is single-threaded; independent tapes may live on different threads.
/// It also counts multiply-accumulate operations for every matrix-product-like
/// op and the total bytes of tensor values it holds.
pub struct Tape<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    macs: u64,
    bytes: usize,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            bytes: 0,
        }
    }
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize]) -> (usize, usize) {
    let inner = *shape.last().unwrap();
    (shape.iter().product::<usize>() / inner, inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn narrow<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

impl Tape<'_, f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Bytes of tensor values created by ops on this tape (bound parameters excluded).
    pub fn value_bytes(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.bytes += value.len() * T::BYTES;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter by reference; it requires a gradient.
    pub fn param(&mut self, value: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                sa,
                sb
            ));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(dim_err!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                sa,
                sb
            ));
        }
        let out = kernels::gemm(self.value(a).data(), self.value(b).data(), m, ka, n, ta, tb);
        self.macs += (m * ka * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k: ka,
                n,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "elementwise op on shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |p, q| p + q,
            BinaryKind::Sub => |p, q| p - q,
            BinaryKind::Mul => |p, q| p * q,
            BinaryKind::Div => |p, q| p / q,
        };
        let out: Vec<T> = xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn row_broadcast(&mut self, kind: BroadcastKind, x: Var, v: Var) -> Result<Var> {
        let (_, inner) = outer_inner(self.shape(x));
        if self.value(v).len() != inner {
            return Err(dim_err!(
                "row broadcast of {:?} over {:?}",
                self.shape(v),
                self.shape(x)
            ));
        }
        let vv = self.value(v).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(vv).map(move |(&a, &b)| kind.apply(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::RowBroadcast { kind, x, v },
            rg,
        ))
    }

    /// Add a vector to every row (bias add).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(BroadcastKind::Add, x, v)
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(BroadcastKind::Mul, x, v)
    }

    fn col_broadcast(&mut self, kind: BroadcastKind, x: Var, v: Var) -> Result<Var> {
        let lead = self.shape(x)[0];
        if self.value(v).len() != lead {
            return Err(dim_err!(
                "column broadcast of {:?} over {:?}",
                self.shape(v),
                self.shape(x)
            ));
        }
        let inner = self.value(x).len() / lead;
        let vv = self.value(v).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(vv)
            .flat_map(|(row, &b)| row.iter().map(move |&a| kind.apply(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::ColBroadcast { kind, x, v },
            rg,
        ))
    }

    /// Add `v[i]` to every element of leading slice `i` (per-channel bias).
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast(BroadcastKind::Add, x, v)
    }

    /// Scale leading slice `i` by `v[i]` (channel gating).
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast(BroadcastKind::Mul, x, v)
    }

    /// Divide leading slice `i` by `v[i]`.
    pub fn div_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast(BroadcastKind::Div, x, v)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v * s).collect()).unwrap();
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v + s).collect()).unwrap();
        let rg = self.requires_grad(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|&v| kind.apply(v)).collect()).unwrap();
        let rg = self.requires_grad(x);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, inner) = outer_inner(t.shape());
        let mut out = Vec::with_capacity(t.len());
        let mut exps = vec![0.0f64; inner];
        for row in t.data().chunks(inner) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).wide();
            let mut sum = 0.0f64;
            for (e, &v) in exps.iter_mut().zip(row) {
                *e = libm::exp(v.wide() - m);
                sum += *e;
            }
            out.extend(exps.iter().map(|e| T::of(e / sum)));
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Layer normalization over the last axis followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(alloc::format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let t = self.value(x);
        let (rows, c) = outer_inner(t.shape());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err!(
                "layer_norm over {:?} with gamma {:?} and beta {:?}",
                t.shape(),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in t.data().chunks(c) {
            let mean = row.iter().map(|v| v.wide()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.wide() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd.push(r);
            for ((&v, &gv), &bv) in row.iter().zip(g).zip(b) {
                out.push(T::of((v.wide() - mean) * r) * gv + bv);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            rg,
        ))
    }

    // ---- convolution and pooling ---------------------------------------

    /// Cross-correlation of a `C_in × H × W` input with `C_out × C_in × k × k` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[0] {
            return Err(dim_err!(
                "conv2d input {:?} incompatible with kernel {:?}",
                sx,
                sw
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let (pad_top, pad_left, ph, pw) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Explicit(p) => (p, p, 2 * p, 2 * p),
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(h);
                let pw = ((ow - 1) * stride + k).saturating_sub(wd);
                (ph / 2, pw / 2, ph, pw)
            }
        };
        if k > h + ph || k > wd + pw {
            return Err(dim_err!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                k,
                k,
                h + ph,
                wd + pw
            ));
        }
        let geom = ConvGeometry {
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad_top,
            pad_left,
            out_h: (h + ph - k) / stride + 1,
            out_w: (wd + pw - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), c_in, &geom);
        let kk = c_in * k * k;
        let out = kernels::gemm(
            self.value(w).data(),
            &cols,
            c_out,
            kk,
            geom.out_len(),
            false,
            false,
        );
        self.macs += (c_out * kk * geom.out_len()) as u64;
        let out = Tensor::new(&[c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, rg))
    }

    /// Per-channel "same" convolution of `C × H × W` with `C × k × k` kernels, `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() == 3 && sw[1] == sw[2] && sw[1] % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "depthwise kernel size must be odd, got {}",
                sw[1]
            )));
        }
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[0] || sw[1] != sw[2] {
            return Err(dim_err!(
                "depthwise conv input {:?} incompatible with kernel {:?}",
                sx,
                sw
            ));
        }
        let (c, h, wd, k) = (sx[0], sx[1], sx[2], sw[1]);
        let mut out = vec![T::zero(); c * h * wd];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for ch in 0..c {
            kernels::depthwise_plane(
                &xv[ch * h * wd..(ch + 1) * h * wd],
                &wv[ch * k * k..(ch + 1) * k * k],
                h,
                wd,
                k,
                &mut out[ch * h * wd..(ch + 1) * h * wd],
            );
        }
        self.macs += (c * h * wd * k * k) as u64;
        let out = Tensor::new(&[c, h, wd], out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::DepthwiseConv2d { x, w }, rg))
    }

    /// Pool every leading slice (channel) to a single value: `C × … → C × 1 × 1`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(dim_err!(
                "global_pool needs a channel axis, got {:?}",
                t.shape()
            ));
        }
        let c = t.shape()[0];
        let inner = t.len() / c;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::new();
        for plane in t.data().chunks(inner) {
            match kind {
                PoolKind::Max => {
                    let (mut best, mut at) = (plane[0], 0);
                    for (i, &v) in plane.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            at = i;
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
                PoolKind::Avg => {
                    let s: f64 = plane.iter().map(|v| v.wide()).sum();
                    out.push(T::of(s / inner as f64));
                }
            }
        }
        let out = Tensor::new(&[c, 1, 1], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::GlobalPool { x, kind, argmax }, rg))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err!(
                "invalid permutation {:?} for shape {:?}",
                axes,
                shape
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = kernels::permute(self.value(x).data(), &shape, axes);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| dim_err!("concat of zero tensors"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!(
                "concat axis {} out of range for {:?}",
                axis,
                first
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat axis {}: {:?} vs {:?}", axis, s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out =
            Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "slice [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(dim_err!(
                "split sizes {:?} on axis {} of {:?}",
                sizes,
                axis,
                shape
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.wide()).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of an `M × K` matrix, shaped `1 × K`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(dim_err!("sum_rows needs a matrix, got {:?}", t.shape()));
        }
        let k = t.shape()[1];
        let mut acc = vec![0.0f64; k];
        for row in t.data().chunks(k) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.wide());
        }
        let out = Tensor::new(&[1, k], narrow(acc))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SumRows { x }, rg))
    }

    /// Record a scalar computed outside the tape together with its gradient
    /// with respect to `x`.
    pub fn fused_scalar(&mut self, x: Var, value: f64, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(dim_err!(
                "fused gradient has {} entries for input {:?}",
                local_grad.len(),
                self.shape(x)
            ));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::scalar(T::of(value)),
            Op::Fused { x, local_grad },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, &Tensor::scalar(T::one()))
    }

    /// Reverse sweep from `out` with an explicit upstream gradient.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward from a variable not on this tape".into(),
            ));
        }
        if seed.len() != self.value(out).len() {
            return Err(dim_err!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.shape(Var(i)), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    // dA' = dC · B'ᵀ (m × k); stored transposed when `ta`
                    let da = if ta {
                        kernels::gemm(bv, g, k, n, m, tb, true)
                    } else {
                        kernels::gemm(g, bv, m, n, k, false, !tb)
                    };
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    // dB' = A'ᵀ · dC (k × n); stored transposed when `tb`
                    let db = if tb {
                        kernels::gemm(g, av, n, m, k, true, ta)
                    } else {
                        kernels::gemm(av, g, k, m, n, !ta, false)
                    };
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let da: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().zip(bv).map(|(&g, &b)| g * b).collect(),
                        BinaryKind::Div => g.iter().zip(bv).map(|(&g, &b)| g / b).collect(),
                    };
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let db: Vec<T> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|&g| -g).collect(),
                        BinaryKind::Mul => g.iter().zip(av).map(|(&g, &a)| g * a).collect(),
                        BinaryKind::Div => g
                            .iter()
                            .zip(av)
                            .zip(bv)
                            .map(|((&g, &a), &b)| -g * a / (b * b))
                            .collect(),
                    };
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::RowBroadcast { kind, x, v } => {
                let vv = self.value(v).data();
                let xv = self.value(x).data();
                let inner = vv.len();
                if self.wants(x) {
                    let dx: Vec<T> = g
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .flat_map(|(gr, xr)| {
                            gr.iter()
                                .zip(xr)
                                .zip(vv)
                                .map(move |((&g, &a), &b)| g * kind.partials(a, b).0)
                        })
                        .collect();
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(v) {
                    let mut acc = vec![0.0f64; inner];
                    for (gr, xr) in g.chunks(inner).zip(xv.chunks(inner)) {
                        for j in 0..inner {
                            acc[j] += (gr[j] * kind.partials(xr[j], vv[j]).1).wide();
                        }
                    }
                    accumulate_owned(&mut grads[v.0], narrow(acc));
                }
            }
            &Op::ColBroadcast { kind, x, v } => {
                let vv = self.value(v).data();
                let xv = self.value(x).data();
                let inner = g.len() / vv.len();
                if self.wants(x) {
                    let dx: Vec<T> = g
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .zip(vv)
                        .flat_map(|((gr, xr), &b)| {
                            gr.iter()
                                .zip(xr)
                                .map(move |(&g, &a)| g * kind.partials(a, b).0)
                        })
                        .collect();
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(v) {
                    let dv: Vec<T> = g
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .zip(vv)
                        .map(|((gr, xr), &b)| {
                            let s: f64 = gr
                                .iter()
                                .zip(xr)
                                .map(|(&g, &a)| (g * kind.partials(a, b).1).wide())
                                .sum();
                            T::of(s)
                        })
                        .collect();
                    accumulate_owned(&mut grads[v.0], dv);
                }
            }
            &Op::Scale { x, s } => {
                accumulate_owned(&mut grads[x.0], g.iter().map(|&g| g * s).collect());
            }
            &Op::AddScalar { x } => accumulate(&mut grads[x.0], g),
            &Op::Activation { x, kind } => {
                let xv = self.value(x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| g * kind.derivative(x))
                    .collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let (_, inner) = outer_inner(node.value.shape());
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(inner).zip(g.chunks(inner)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y.wide() * g.wide()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(y, g)| T::of(y.wide() * (g.wide() - dot))),
                    );
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let c = gv.len();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = Vec::with_capacity(xv.len());
                let mut xhat = vec![0.0f64; c];
                let mut dxhat = vec![0.0f64; c];
                for ((xr, gr), &r) in xv.chunks(c).zip(g.chunks(c)).zip(rstd) {
                    let mean = xr.iter().map(|v| v.wide()).sum::<f64>() / c as f64;
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..c {
                        xhat[j] = (xr[j].wide() - mean) * r;
                        dxhat[j] = gr[j].wide() * gv[j].wide();
                        dgamma[j] += gr[j].wide() * xhat[j];
                        dbeta[j] += gr[j].wide();
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                    dx.extend((0..c).map(|j| T::of(r * (dxhat[j] - m1 - xhat[j] * m2))));
                }
                if self.wants(x) {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(gamma) {
                    accumulate_owned(&mut grads[gamma.0], narrow(dgamma));
                }
                if self.wants(beta) {
                    accumulate_owned(&mut grads[beta.0], narrow(dbeta));
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (c_in, c_out, k) = (sx[0], sw[0], sw[2]);
                let kk = c_in * k * k;
                let n_out = geom.out_len();
                if self.wants(w) {
                    let cols = kernels::im2col(self.value(x).data(), c_in, &geom);
                    let dw = kernels::gemm(g, &cols, c_out, n_out, kk, false, true);
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if self.wants(x) {
                    let dcols =
                        kernels::gemm(self.value(w).data(), g, kk, c_out, n_out, true, false);
                    let mut dx = vec![T::zero(); c_in * geom.in_h * geom.in_w];
                    kernels::col2im(&dcols, c_in, &geom, &mut dx);
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            &Op::DepthwiseConv2d { x, w } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (c, h, wd, k) = (sx[0], sx[1], sx[2], sw[1]);
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let plane = h * wd;
                for ch in 0..c {
                    kernels::depthwise_plane_backward(
                        &xv[ch * plane..(ch + 1) * plane],
                        &wv[ch * k * k..(ch + 1) * k * k],
                        &g[ch * plane..(ch + 1) * plane],
                        h,
                        wd,
                        k,
                        &mut dx[ch * plane..(ch + 1) * plane],
                        &mut dw[ch * k * k..(ch + 1) * k * k],
                    );
                }
                if self.wants(x) {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(w) {
                    accumulate_owned(&mut grads[w.0], dw);
                }
            }
            Op::GlobalPool { x, kind, argmax } => {
                let n = self.value(*x).len();
                let c = g.len();
                let inner = n / c;
                let mut dx = vec![T::zero(); n];
                for ch in 0..c {
                    match kind {
                        PoolKind::Max => dx[ch * inner + argmax[ch]] = g[ch],
                        PoolKind::Avg => {
                            let v = T::of(g[ch].wide() / inner as f64);
                            dx[ch * inner..(ch + 1) * inner]
                                .iter_mut()
                                .for_each(|d| *d = v);
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            &Op::Reshape { x } => accumulate(&mut grads[x.0], g),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = kernels::permute(g, node.value.shape(), &inverse);
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let out_chunk = g.len() / outer;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).len() / outer;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(self.value(v).len());
                        for o in 0..outer {
                            let base = o * out_chunk + offset;
                            dv.extend_from_slice(&g[base..base + chunk]);
                        }
                        accumulate_owned(&mut grads[v.0], dv);
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); self.value(x).len()]);
                for o in 0..outer {
                    let base = (o * shape[axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    slot[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                accumulate_owned(&mut grads[x.0], vec![g[0]; n]);
            }
            &Op::SumRows { x } => {
                let k = g.len();
                let rows = self.value(x).len() / k;
                let mut dx = Vec::with_capacity(rows * k);
                for _ in 0..rows {
                    dx.extend_from_slice(g);
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Fused { x, local_grad } => {
                let s = g[0];
                accumulate_owned(&mut grads[x.0], local_grad.iter().map(|&v| v * s).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f32), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn each_node_visited_once_with_shared_inputs() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x);
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
        let x = tape.constant(t(&[2, 2], &[1e4, -1e4, 3e4, 3e4]));
        let y = tape.softmax(x);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2, 2], &[5.0, 5.0, 1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-6 && (d[3] - 1.0).abs() < 1e-6);
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::EluPlusOne.apply(0.0), 1.0);
        assert!(Activation::EluPlusOne.apply(-30.0) > 0.0);
    }

    #[test]
    fn conv_scaling_and_block_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let x = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f32));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, 2, Padding::Valid).unwrap();
        // brute-force sliding window oracle
        let xv = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let mut want = vec![];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += xv.at(&[0, oy * 2 + dy, ox * 2 + dx]);
                    }
                }
                want.push(s);
            }
        }
        assert_eq!(tape.value(y).data(), &want[..]);
    }

    #[test]
    fn conv_same_padding_shape_contract() {
        let mut tape = Tape::new();
        for (h, w, r) in [(8, 8, 2), (7, 5, 2), (9, 12, 4), (6, 6, 3), (5, 5, 5)] {
            let x = tape.constant(Tensor::zeros(&[2, h, w]));
            let k = tape.constant(Tensor::zeros(&[3, 2, r, r]));
            let y = tape.conv2d(x, k, r, Padding::Same).unwrap();
            assert_eq!(tape.shape(y), &[3, h.div_ceil(r), w.div_ceil(r)]);
        }
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn depthwise_delta_kernel_is_identity_and_even_kernel_rejected() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 4, 5], |i| (i as f32 * 0.3).sin());
        let x = tape.constant(xv.clone());
        let mut delta = Tensor::zeros(&[2, 3, 3]);
        delta.data_mut()[4] = 1.0;
        delta.data_mut()[13] = 1.0;
        let w = tape.constant(delta);
        let y = tape.depthwise_conv2d(x, w).unwrap();
        assert_eq!(tape.value(y), &xv);
        let w2 = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(
            tape.depthwise_conv2d(x, w2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn global_pool_hand_case_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let mx = tape.global_pool(x, PoolKind::Max).unwrap();
        let av = tape.global_pool(x, PoolKind::Avg).unwrap();
        assert_eq!(tape.value(mx).data(), &[4.0]);
        assert_eq!(tape.value(av).data(), &[2.5]);
        assert_eq!(tape.shape(mx), &[1, 1, 1]);

        let y = tape.leaf(t(&[1, 2, 2], &[7.0, 1.0, 7.0, 7.0]), true);
        let m = tape.global_pool(y, PoolKind::Max).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reshape_permute_concat_split_round_trips() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[3, 2, 4], |i| i as f32);
        let x = tape.constant(xv.clone());
        let flat = tape.reshape(x, &[3, 8]).unwrap();
        let tokens = tape.transpose(flat).unwrap();
        let back = tape.transpose(tokens).unwrap();
        let grid = tape.reshape(back, &[3, 2, 4]).unwrap();
        assert_eq!(tape.value(grid), &xv);

        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[2, 1], |i| 100.0 + i as f32));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 2.0, 100.0, 3.0, 4.0, 5.0, 101.0]
        );
        let parts = tape.split(c, 1, &[3, 1]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        assert!(tape.split(c, 1, &[3, 2]).is_err());
        assert!(tape.reshape(c, &[3, 3]).is_err());
    }
}
