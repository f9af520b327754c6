//! Dense numeric kernels shared by the tape ops. Accumulations run in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `C = op(A) · op(B)` where `op(A)` is `m × k` and `op(B)` is `k × n`.
///
/// `A` is stored `m × k` (or `k × m` when `ta`), `B` is stored `k × n`
/// (or `n × k` when `tb`).
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // widen B once, laid out k × n
    let bw: Vec<f64> = if tb {
        transpose2(b, n, k).into_iter().map(T::wide).collect()
    } else {
        b.iter().map(|v| v.wide()).collect()
    };
    let mut out = vec![T::zero(); m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = if ta { a[p * m + i] } else { a[i * k + p] }.wide();
            if aip == 0.0 {
                continue;
            }
            let row = &bw[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(row) {
                *s += aip * bv;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of(s);
        }
    }
    out
}

/// Transpose a row-major `rows × cols` matrix.
pub fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// General axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 2 && axes == [1, 0] {
        return transpose2(x, shape[0], shape[1]);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        // advance odometer over all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Geometry of a 2-D convolution over a `C × H × W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold a `C × H × W` input into `(C·k·k) × (H'·W')` columns.
pub fn im2col<T: Real>(x: &[T], channels: usize, g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let n_out = g.out_len();
    let mut cols = vec![T::zero(); channels * k * k * n_out];
    for c in 0..channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C × H × W` buffer.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry, out: &mut [T]) {
    let k = g.kernel;
    let n_out = g.out_len();
    for c in 0..channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise "same" convolution of one `H × W` plane with an odd `k × k` kernel.
pub fn depthwise_plane<T: Real>(x: &[T], w: &[T], h: usize, wd: usize, k: usize, out: &mut [T]) {
    let r = (k / 2) as isize;
    let mut acc = vec![0.0f64; h * wd];
    for ky in 0..k {
        for kx in 0..k {
            let wv = w[ky * k + kx].wide();
            let dy = ky as isize - r;
            let dx = kx as isize - r;
            for y in 0..h as isize {
                let iy = y + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (wd as isize - dx).min(wd as isize) as usize;
                let src = &x[iy as usize * wd..(iy as usize + 1) * wd];
                let dst = &mut acc[y as usize * wd..(y as usize + 1) * wd];
                for xx in x_lo..x_hi {
                    dst[xx] += wv * src[(xx as isize + dx) as usize].wide();
                }
            }
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = T::of(a);
    }
}

/// Gradients of [`depthwise_plane`] with respect to input and kernel.
pub fn depthwise_plane_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    h: usize,
    wd: usize,
    k: usize,
    dx: &mut [T],
    dw: &mut [T],
) {
    let r = (k / 2) as isize;
    let mut dx_acc = vec![0.0f64; h * wd];
    for ky in 0..k {
        for kx in 0..k {
            let wv = w[ky * k + kx].wide();
            let oy = ky as isize - r;
            let ox = kx as isize - r;
            let mut dw_acc = 0.0f64;
            for y in 0..h as isize {
                let iy = y + oy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (wd as isize - ox).min(wd as isize) as usize;
                let g_row = &dout[y as usize * wd..(y as usize + 1) * wd];
                let base = iy as usize * wd;
                for xx in x_lo..x_hi {
                    let src = (xx as isize + ox) as usize;
                    let g = g_row[xx].wide();
                    dw_acc += g * x[base + src].wide();
                    dx_acc[base + src] += g * wv;
                }
            }
            dw[ky * k + kx] += T::of(dw_acc);
        }
    }
    for (d, a) in dx.iter_mut().zip(dx_acc) {
        *d += T::of(a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose2(&a, m, k);
        let bt = transpose2(&b, k, n);
        assert_eq!(gemm(&a, &b, m, k, n, false, false), want);
        assert_eq!(gemm(&at, &b, m, k, n, true, false), want);
        assert_eq!(gemm(&a, &bt, m, k, n, false, true), want);
        assert_eq!(gemm(&at, &bt, m, k, n, true, true), want);
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let y = permute(&x, &shape, &[2, 0, 1]);
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    assert_eq!(y[(c * 2 + a) * 3 + b], x[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }
}
