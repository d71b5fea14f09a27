//! Numeric kernels behind the graph ops: convolution, transposed
//! convolution, 2x2 max pooling and bilinear resampling, forward and
//! backward.
//!
//! Convolutions are computed one kernel tap at a time: the input is gathered
//! into a `[C_in, H_out * W_out]` panel for tap `(ky, kx)` and multiplied by
//! the `[C_out, C_in]` slice of the kernel for that tap. The transposed
//! convolution is the exact adjoint, using the same gather/scatter pair.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::linalg::{gemm, MatMut, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
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
    /// Geometry of a direct convolution.
    pub fn conv(
        (c_in, h, w): (usize, usize, usize),
        (c_out, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(contract!("convolution stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(contract!(
                "kernel {}x{} does not fit a {}x{} input with padding {}",
                kh,
                kw,
                h,
                w,
                pad
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
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution; `h_out`/`w_out` is the
    /// upsampled size.
    pub fn transposed(
        (c_in, h, w): (usize, usize, usize),
        (c_out, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || h == 0 || w == 0 {
            return Err(contract!(
                "transposed convolution needs stride > 0 and a non-empty input"
            ));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(contract!("padding {} consumes the whole transposed output", pad));
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
            h_out: full_h - 2 * pad,
            w_out: full_w - 2 * pad,
        })
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }
}

/// Positions `x` in `0..grid` whose source column `x * stride + k - pad` lies
/// in `0..size`; they always form one contiguous range.
fn valid_range(grid: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = grid;
    let mut hi = 0;
    for x in 0..grid {
        let pos = (x * stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < size {
            lo = lo.min(x);
            hi = x + 1;
        }
    }
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// `dst[c, y, x] = src[c, y*s + ky - pad, x*s + kx - pad]` (zero outside).
#[allow(clippy::too_many_arguments)]
fn gather(
    src: &[f64],
    channels: usize,
    (sh, sw): (usize, usize),
    (ky, kx): (usize, usize),
    stride: usize,
    pad: usize,
    (gh, gw): (usize, usize),
    dst: &mut [f64],
) {
    let (x_lo, x_hi) = valid_range(gw, sw, kx, stride, pad);
    for c in 0..channels {
        for y in 0..gh {
            let row = &mut dst[(c * gh + y) * gw..(c * gh + y + 1) * gw];
            let iy = (y * stride + ky) as isize - pad as isize;
            if iy < 0 || iy as usize >= sh || x_lo >= x_hi {
                row.fill(0.0);
                continue;
            }
            let src_row = &src[(c * sh + iy as usize) * sw..(c * sh + iy as usize + 1) * sw];
            row[..x_lo].fill(0.0);
            row[x_hi..].fill(0.0);
            let first = x_lo * stride + kx - pad;
            if stride == 1 {
                row[x_lo..x_hi].copy_from_slice(&src_row[first..first + (x_hi - x_lo)]);
            } else {
                for (i, x) in (x_lo..x_hi).enumerate() {
                    row[x] = src_row[first + i * stride];
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: `dst[c, y*s + ky - pad, x*s + kx - pad] += src[c, y, x]`.
#[allow(clippy::too_many_arguments)]
fn scatter_add(
    dst: &mut [f64],
    channels: usize,
    (sh, sw): (usize, usize),
    (ky, kx): (usize, usize),
    stride: usize,
    pad: usize,
    (gh, gw): (usize, usize),
    src: &[f64],
) {
    let (x_lo, x_hi) = valid_range(gw, sw, kx, stride, pad);
    if x_lo >= x_hi {
        return;
    }
    for c in 0..channels {
        for y in 0..gh {
            let iy = (y * stride + ky) as isize - pad as isize;
            if iy < 0 || iy as usize >= sh {
                continue;
            }
            let row = &src[(c * gh + y) * gw..(c * gh + y + 1) * gw];
            let dst_row = &mut dst[(c * sh + iy as usize) * sw..(c * sh + iy as usize + 1) * sw];
            let first = x_lo * stride + kx - pad;
            for (i, x) in (x_lo..x_hi).enumerate() {
                dst_row[first + i * stride] += row[x];
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Kernel slice for tap `k` viewed as a `[C_out, C_in]` matrix
/// (weights laid out `[C_out, C_in, kH, kW]`).
fn conv_tap<'a>(weight: &'a [f64], g: &ConvGeom, k: usize) -> MatRef<'a> {
    MatRef {
        data: &weight[k..],
        rows: g.c_out,
        cols: g.c_in,
        rs: g.c_in * g.taps(),
        cs: g.taps(),
    }
}

pub(crate) fn conv2d_forward(input: &[f64], g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane];
    if is_pointwise(g) {
        gemm(
            1.0,
            conv_tap(weight, g, 0),
            MatRef::dense(input, g.c_in, plane),
            0.0,
            MatMut::dense(&mut out, g.c_out, plane),
        );
    } else {
        let mut panel = vec![0.0; g.c_in * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                gather(
                    input,
                    g.c_in,
                    (g.h, g.w),
                    (ky, kx),
                    g.stride,
                    g.pad,
                    (g.h_out, g.w_out),
                    &mut panel,
                );
                gemm(
                    1.0,
                    conv_tap(weight, g, ky * g.kw + kx),
                    MatRef::dense(&panel, g.c_in, plane),
                    1.0,
                    MatMut::dense(&mut out, g.c_out, plane),
                );
            }
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, plane);
    }
    out
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums_into(grad: &[f64], plane: usize, db: &mut [f64]) {
    for (chunk, acc) in grad.chunks(plane).zip(db.iter_mut()) {
        *acc += chunk.iter().sum::<f64>();
    }
}

/// Accumulates input, weight and bias gradients of a direct convolution.
pub(crate) fn conv2d_backward(
    input: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let plane = g.h_out * g.w_out;
    let taps = g.taps();
    let dout = MatRef::dense(grad_out, g.c_out, plane);
    if let Some(db) = grad_b {
        channel_sums_into(grad_out, plane, db);
    }
    if let Some(dw) = grad_w {
        let mut panel = if is_pointwise(g) {
            Vec::new()
        } else {
            vec![0.0; g.c_in * plane]
        };
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = ky * g.kw + kx;
                let cols: &[f64] = if is_pointwise(g) {
                    input
                } else {
                    gather(
                        input,
                        g.c_in,
                        (g.h, g.w),
                        (ky, kx),
                        g.stride,
                        g.pad,
                        (g.h_out, g.w_out),
                        &mut panel,
                    );
                    &panel
                };
                gemm(
                    1.0,
                    dout,
                    MatRef::dense(cols, g.c_in, plane).t(),
                    1.0,
                    MatMut {
                        data: &mut dw[k..],
                        rows: g.c_out,
                        cols: g.c_in,
                        rs: g.c_in * taps,
                        cs: taps,
                    },
                );
            }
        }
    }
    if let Some(dx) = grad_in {
        if is_pointwise(g) {
            gemm(
                1.0,
                conv_tap(weight, g, 0).t(),
                dout,
                1.0,
                MatMut::dense(dx, g.c_in, plane),
            );
            return;
        }
        let mut panel = vec![0.0; g.c_in * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                gemm(
                    1.0,
                    conv_tap(weight, g, ky * g.kw + kx).t(),
                    dout,
                    0.0,
                    MatMut::dense(&mut panel, g.c_in, plane),
                );
                scatter_add(
                    dx,
                    g.c_in,
                    (g.h, g.w),
                    (ky, kx),
                    g.stride,
                    g.pad,
                    (g.h_out, g.w_out),
                    &panel,
                );
            }
        }
    }
}

/// Kernel slice for tap `k` viewed as `[C_in, C_out]`
/// (transposed-conv weights laid out `[C_in, C_out, kH, kW]`).
fn transposed_tap<'a>(weight: &'a [f64], g: &ConvGeom, k: usize) -> MatRef<'a> {
    MatRef {
        data: &weight[k..],
        rows: g.c_in,
        cols: g.c_out,
        rs: g.c_out * g.taps(),
        cs: g.taps(),
    }
}

pub(crate) fn conv_transpose2d_forward(input: &[f64], g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let mut out = vec![0.0; g.c_out * g.h_out * g.w_out];
    let mut contrib = vec![0.0; g.c_out * in_plane];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            gemm(
                1.0,
                transposed_tap(weight, g, ky * g.kw + kx).t(),
                MatRef::dense(input, g.c_in, in_plane),
                0.0,
                MatMut::dense(&mut contrib, g.c_out, in_plane),
            );
            scatter_add(
                &mut out,
                g.c_out,
                (g.h_out, g.w_out),
                (ky, kx),
                g.stride,
                g.pad,
                (g.h, g.w),
                &contrib,
            );
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.h_out * g.w_out);
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    input: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let in_plane = g.h * g.w;
    let taps = g.taps();
    if let Some(db) = grad_b {
        channel_sums_into(grad_out, g.h_out * g.w_out, db);
    }
    if grad_in.is_none() && grad_w.is_none() {
        return;
    }
    let mut panel = vec![0.0; g.c_out * in_plane];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let k = ky * g.kw + kx;
            gather(
                grad_out,
                g.c_out,
                (g.h_out, g.w_out),
                (ky, kx),
                g.stride,
                g.pad,
                (g.h, g.w),
                &mut panel,
            );
            let gathered = MatRef::dense(&panel, g.c_out, in_plane);
            if let Some(dx) = grad_in.as_deref_mut() {
                gemm(
                    1.0,
                    transposed_tap(weight, g, k),
                    gathered,
                    1.0,
                    MatMut::dense(dx, g.c_in, in_plane),
                );
            }
            if let Some(dw) = grad_w.as_deref_mut() {
                gemm(
                    1.0,
                    MatRef::dense(input, g.c_in, in_plane),
                    gathered.t(),
                    1.0,
                    MatMut {
                        data: &mut dw[k..],
                        rows: g.c_in,
                        cols: g.c_out,
                        rs: g.c_out * taps,
                        cs: taps,
                    },
                );
            }
        }
    }
}

/// 2x2 max pooling with stride 2; returns the pooled values and, for each,
/// the flat index of the winning input element (first maximum on ties).
pub(crate) fn max_pool2_forward(input: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let base = ch * h * w + 2 * y * w + 2 * x;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Per-axis source taps of align-corners-false bilinear resampling:
/// `(i0, i1, w0, w1)` for each output coordinate.
pub(crate) fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn bilinear_forward(input: &[f64], (c, h, w): (usize, usize, usize), (ho, wo): (usize, usize)) -> Vec<f64> {
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ys {
            for &(x0, x1, wx0, wx1) in &xs {
                let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                let bottom = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                out.push(wy0 * top + wy1 * bottom);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    grad_in: &mut [f64],
) {
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    for ch in 0..c {
        let plane = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let g = go[oy * wo + ox];
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(input: &[f64], g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.h_out * g.w_out];
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                acc += input[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[(co * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        out
    }

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * 0.37 + phase)).collect()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 3)] {
            let g = ConvGeom::conv((3, 7, 6), (4, k, k), stride, pad).unwrap();
            let x = wave(3 * 7 * 6, 0.1);
            let w = wave(4 * 3 * k * k, 0.7);
            let fast = conv2d_forward(&x, &g, &w, None);
            let slow = naive_conv(&x, &g, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let g = ConvGeom::conv((3, 7, 7), (5, 3, 3), 2, 1).unwrap();
        let gt = ConvGeom::transposed((5, g.h_out, g.w_out), (3, 3, 3), 2, 1).unwrap();
        assert_eq!((gt.h_out, gt.w_out), (7, 7));
        // Weight layouts coincide: conv [5,3,k,k] is transposed-conv [C_in=5, C_out=3, k, k].
        let w = wave(5 * 3 * 9, 0.3);
        let x = wave(3 * 7 * 7, 1.1);
        let y = wave(5 * g.h_out * g.w_out, 2.0);
        let cx = conv2d_forward(&x, &g, &w, None);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ty = conv_transpose2d_forward(&y, &gt, &w, None);
        let rhs: f64 = (0..3)
            .flat_map(|c| (0..7).flat_map(move |r| (0..7).map(move |q| (c, r, q))))
            .map(|(c, r, q)| ty[(c * 7 + r) * 7 + q] * x[(c * 7 + r) * 7 + q])
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn stride_two_transposed_doubles_size() {
        let g = ConvGeom::transposed((4, 5, 3), (2, 2, 2), 2, 0).unwrap();
        assert_eq!((g.h_out, g.w_out), (10, 6));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = wave(2 * 3 * 4, 0.0);
        assert_eq!(bilinear_forward(&x, (2, 3, 4), (3, 4)), x);
        let ones = vec![1.0; 4];
        let up = bilinear_forward(&ones, (1, 2, 2), (8, 8));
        assert!(up.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let x = [1.0, 3.0, 3.0, 0.0, /* row 1 */ 2.0, 3.0, 5.0, 5.0];
        let (v, a) = max_pool2_forward(&x, (1, 2, 4));
        assert_eq!(v, [3.0, 5.0]);
        assert_eq!(a, [1, 6]);
    }
}
