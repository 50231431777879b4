//! Raw slice kernels shared by the graph primitives, the oracles' callers
//! and the complexity benchmark. Everything is row-major.
//!
//! Parallel kernels split work by output slab only, so each output value is
//! produced by one sequential loop whatever the thread count.

use rayon::prelude::*;

use crate::attention::ScopeMask;
use crate::error::{Error, Result};
use crate::tensor::Real;

const PAR_THRESHOLD: usize = 1 << 15;

/// C[m×q] = A[m×p] · B[p×q]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * q];
    let row = |(i, out): (usize, &mut [T])| {
        for l in 0..p {
            let a_il = a[i * p + l];
            let b_row = &b[l * q..(l + 1) * q];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    };
    if m * p * q >= PAR_THRESHOLD {
        c.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        c.chunks_mut(q).enumerate().for_each(row);
    }
    c
}

/// C[m×q] = A[m×p] · B[q×p]ᵀ
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * q];
    let row = |(i, out): (usize, &mut [T])| {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * p..(j + 1) * p]);
        }
    };
    if m * p * q >= PAR_THRESHOLD {
        c.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        c.chunks_mut(q).enumerate().for_each(row);
    }
    c
}

/// C[p×q] = A[m×p]ᵀ · B[m×q]
pub fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * q];
    let row = |(l, out): (usize, &mut [T])| {
        for i in 0..m {
            let a_il = a[i * p + l];
            let b_row = &b[i * q..(i + 1) * q];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    };
    if m * p * q >= PAR_THRESHOLD {
        c.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        c.chunks_mut(q).enumerate().for_each(row);
    }
    c
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Output length of a strided convolution, requiring exact division.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::config(format!(
            "kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::config(format!(
            "convolution does not tile exactly: ({input} + 2·{pad} − {kernel}) is not a multiple of {stride}"
        )));
    }
    Ok(span / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize, usize),
        kernel: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = input;
        let (c_out, k_in, kh, kw) = kernel;
        if k_in != c_in {
            return Err(Error::shape(
                "conv2d",
                &[c_in, h, w],
                &[c_out, k_in, kh, kw],
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: conv_out_len(h, kh, stride, pad)?,
            w_out: conv_out_len(w, kw, stride, pad)?,
        })
    }

    fn macs(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw * self.h_out * self.w_out
    }

    /// Output columns `x` for which input column `x·stride + v − pad` is in range.
    #[inline]
    fn x_range(&self, v: usize) -> (usize, usize) {
        let lo = if self.pad > v {
            (self.pad - v).div_ceil(self.stride)
        } else {
            0
        };
        // largest x with x*s + v - pad <= w - 1
        let hi = if self.w + self.pad > v {
            ((self.w - 1 + self.pad - v) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, y: usize, u: usize) -> Option<usize> {
        let iy = (y * self.stride + u) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Cross-correlation of `input[c_in×h×w]` with `kernel[c_out×c_in×kh×kw]`.
pub fn conv2d<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.c_out * plane];
    let per_out = |(o, dst): (usize, &mut [T])| {
        for c in 0..g.c_in {
            let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let kval = kernel[((o * g.c_in + c) * g.kh + u) * g.kw + v];
                    if kval == T::zero() {
                        continue;
                    }
                    let (x0, x1) = g.x_range(v);
                    for y in 0..g.h_out {
                        let Some(iy) = g.in_row(y, u) else { continue };
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[y * g.w_out..(y + 1) * g.w_out];
                        for x in x0..x1 {
                            dst_row[x] += kval * src_row[x * g.stride + v - g.pad];
                        }
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(per_out);
    } else {
        out.chunks_mut(plane).enumerate().for_each(per_out);
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Real>(grad_out: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut gin = vec![T::zero(); g.c_in * plane];
    let per_in = |(c, dst): (usize, &mut [T])| {
        for o in 0..g.c_out {
            let src = &grad_out[o * g.h_out * g.w_out..(o + 1) * g.h_out * g.w_out];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let kval = kernel[((o * g.c_in + c) * g.kh + u) * g.kw + v];
                    if kval == T::zero() {
                        continue;
                    }
                    let (x0, x1) = g.x_range(v);
                    for y in 0..g.h_out {
                        let Some(iy) = g.in_row(y, u) else { continue };
                        let src_row = &src[y * g.w_out..(y + 1) * g.w_out];
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        for x in x0..x1 {
                            dst_row[x * g.stride + v - g.pad] += kval * src_row[x];
                        }
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        gin.par_chunks_mut(plane).enumerate().for_each(per_in);
    } else {
        gin.chunks_mut(plane).enumerate().for_each(per_in);
    }
    gin
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel<T: Real>(grad_out: &[T], input: &[T], g: &ConvGeom) -> Vec<T> {
    let per = g.c_in * g.kh * g.kw;
    let mut gk = vec![T::zero(); g.c_out * per];
    let per_out = |(o, dst): (usize, &mut [T])| {
        let src = &grad_out[o * g.h_out * g.w_out..(o + 1) * g.h_out * g.w_out];
        for c in 0..g.c_in {
            let inp = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let (x0, x1) = g.x_range(v);
                    let mut acc = T::zero();
                    for y in 0..g.h_out {
                        let Some(iy) = g.in_row(y, u) else { continue };
                        let in_row = &inp[iy * g.w..(iy + 1) * g.w];
                        let g_row = &src[y * g.w_out..(y + 1) * g.w_out];
                        for x in x0..x1 {
                            acc += g_row[x] * in_row[x * g.stride + v - g.pad];
                        }
                    }
                    dst[(c * g.kh + u) * g.kw + v] = acc;
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        gk.par_chunks_mut(per).enumerate().for_each(per_out);
    } else {
        gk.chunks_mut(per).enumerate().for_each(per_out);
    }
    gk
}

/// Row softmax; entries equal to the masked sentinel come out as exact zeros.
pub fn softmax_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src
            .iter()
            .filter(|v| !v.is_masked())
            .fold(None, |m: Option<T>, &v| Some(m.map_or(v, |m| m.max(v))))
            .ok_or(Error::DegenerateRow { row: r })?;
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            if !s.is_masked() {
                *d = (s - max).exp();
                sum += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// Backward of a softmax over contiguous segments given its output.
pub fn softmax_grad_segment<T: Real>(y: &[T], gy: &[T], gx: &mut [T]) {
    let inner = dot(y, gy);
    for ((g, &yi), &gyi) in gx.iter_mut().zip(y).zip(gy) {
        *g += yi * (gyi - inner);
    }
}

pub struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    cols: usize,
    eps: T,
) -> (Vec<T>, LayerNormSaved<T>) {
    let n = T::lit(cols as f64);
    let mut out = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let xh = (src[j] - mean) * rs;
            xhat[r * cols + j] = xh;
            out[r * cols + j] = xh * gamma[j] + beta[j];
        }
    }
    (out, LayerNormSaved { xhat, rstd })
}

/// Valid per-channel cross-correlation of `search[c×hx×wx]` by `template[c×hz×wz]`.
pub fn depthwise_xcorr<T: Real>(
    template: &[T],
    search: &[T],
    c: usize,
    (hz, wz): (usize, usize),
    (hx, wx): (usize, usize),
) -> Vec<T> {
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let z = &template[ch * hz * wz..(ch + 1) * hz * wz];
        let x = &search[ch * hx * wx..(ch + 1) * hx * wx];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for u in 0..hz {
            for v in 0..wz {
                let zv = z[u * wz + v];
                for y in 0..ho {
                    let x_row = &x[(y + u) * wx + v..(y + u) * wx + v + wo];
                    let d_row = &mut dst[y * wo..(y + 1) * wo];
                    for (d, &xv) in d_row.iter_mut().zip(x_row) {
                        *d += zv * xv;
                    }
                }
            }
        }
    }
    out
}

thread_local! {
    static SCORE_DOTS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of query·key dot products executed by [`local_scores`] on this
/// thread since the last [`reset_score_counter`].
pub fn score_counter() -> u64 {
    SCORE_DOTS.with(|c| c.get())
}

pub fn reset_score_counter() {
    SCORE_DOTS.with(|c| c.set(0));
}

/// Scores `q_i·k_j` for every `j` in the scope of `i`, laid out along the
/// scope's CSR entries. `q`, `k` are `n×d`, rows strided by `stride` with
/// column offset `offset`.
pub fn local_scores<T: Real>(
    q: &[T],
    k: &[T],
    scope: &ScopeMask,
    cols: (usize, usize, usize),
) -> Vec<T> {
    let (stride, offset, d) = cols;
    let mut out = Vec::with_capacity(scope.nnz());
    for i in 0..scope.len() {
        let qi = &q[i * stride + offset..i * stride + offset + d];
        for &j in scope.scope(i) {
            out.push(dot(qi, &k[j * stride + offset..j * stride + offset + d]));
        }
    }
    SCORE_DOTS.with(|c| c.set(c.get() + out.len() as u64));
    out
}

/// Dense `n_q×n_k` score matrix `q·kᵀ`, the quadratic counterpart of
/// [`local_scores`].
pub fn dense_scores<T: Real>(q: &[T], k: &[T], n_q: usize, n_k: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_q * n_k];
    for i in 0..n_q {
        let qi = &q[i * d..(i + 1) * d];
        let dst = &mut out[i * n_k..(i + 1) * n_k];
        for (j, o) in dst.iter_mut().enumerate() {
            *o = dot(qi, &k[j * d..(j + 1) * d]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_len_requires_exact_tiling() {
        assert_eq!(conv_out_len(32, 4, 2, 1).unwrap(), 16);
        assert_eq!(conv_out_len(5, 3, 1, 1).unwrap(), 5);
        assert!(conv_out_len(32, 3, 2, 0).is_err());
        assert!(conv_out_len(2, 5, 1, 0).is_err());
        assert!(conv_out_len(4, 3, 0, 0).is_err());
    }

    #[test]
    fn x_range_matches_bounds_check() {
        for w in 1..8 {
            for k in 1..=5usize {
                for s in 1..=3 {
                    for p in 0..3 {
                        let Ok(wo) = conv_out_len(w, k, s, p) else {
                            continue;
                        };
                        let g = ConvGeom {
                            c_in: 1,
                            h: 1,
                            w,
                            c_out: 1,
                            kh: 1,
                            kw: k,
                            stride: s,
                            pad: p,
                            h_out: 1,
                            w_out: wo,
                        };
                        for v in 0..k {
                            let (lo, hi) = g.x_range(v);
                            for x in 0..wo {
                                let ix = (x * s + v) as isize - p as isize;
                                let inside = ix >= 0 && (ix as usize) < w;
                                assert_eq!(
                                    inside,
                                    x >= lo && x < hi,
                                    "w={w} k={k} s={s} p={p} v={v} x={x}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_all_masked_row_is_degenerate() {
        let s = f64::sentinel();
        let err = softmax_rows(&[0.0, 1.0, s, s], 2, 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }
}
