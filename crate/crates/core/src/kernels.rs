//! Forward and backward numeric kernels on flat NCHW buffers.
//!
//! These are free of any graph bookkeeping; [`crate::tape::Tape`] records
//! which kernel produced a value and calls the matching backward kernel.
//! Per-sample work is spread over the rayon pool, and every reduction across
//! samples is done afterwards in sample order so results do not depend on
//! the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `c = a·b + beta·c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: out out of bounds");
    // SAFETY: the three asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` is in range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    // ox·stride + kx − pad ≤ w − 1
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `[c_in,h,w]` sample into `[c_in·k·k, h_out·w_out]` columns.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (d, v) in dst_row[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst_row[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xs)| {
            let plane = g.out_plane();
            let owned;
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                let mut buf = vec![0.0; g.patch() * plane];
                im2col(xs, g, &mut buf);
                owned = buf;
                &owned
            };
            if let Some(b) = bias {
                for (co, row) in y.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = b[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                g.c_out,
                g.patch(),
                plane,
                kernel,
                (g.patch(), 1),
                cols,
                (plane, 1),
                beta,
                y,
                (plane, 1),
            );
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> ConvGrads {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let klen = g.c_out * g.patch();

    type SampleGrads = (Option<Vec<f64>>, Option<Vec<f64>>);
    let per_sample: Vec<SampleGrads> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dys = &dy[s * out_len..(s + 1) * out_len];
            let dk = need_dkernel.then(|| {
                let owned;
                let cols: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    let mut buf = vec![0.0; g.patch() * plane];
                    im2col(xs, g, &mut buf);
                    owned = buf;
                    &owned
                };
                let mut dk = vec![0.0; klen];
                // dK = dY · colsᵀ
                gemm(
                    g.c_out,
                    plane,
                    g.patch(),
                    dys,
                    (plane, 1),
                    cols,
                    (1, plane),
                    0.0,
                    &mut dk,
                    (g.patch(), 1),
                );
                dk
            });
            let dx = need_dx.then(|| {
                // dcols = Kᵀ · dY
                let mut dcols = vec![0.0; g.patch() * plane];
                gemm(
                    g.patch(),
                    g.c_out,
                    plane,
                    kernel,
                    (1, g.patch()),
                    dys,
                    (plane, 1),
                    0.0,
                    &mut dcols,
                    (plane, 1),
                );
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; in_len];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * in_len));
    let mut dk_all = need_dkernel.then(|| vec![0.0; klen]);
    for (dx, dk) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dk)) = (dk_all.as_mut(), dk) {
            all.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
        }
    }
    let dbias = need_dbias.then(|| {
        let mut db = vec![0.0; g.c_out];
        for s in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let start = s * out_len + co * plane;
                *d += dy[start..start + plane].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        dx: dx_all,
        dkernel: dk_all,
        dbias,
    }
}

/// 2×2/stride-2 max pooling; returns the output and, per output element, the
/// flat input index of the first (row-major) maximal element in its window.
pub(crate) fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let candidates = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Bilinear with half-pixel centers (corners not aligned).
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps `(i0, i1, frac)` along one axis for a ×2 upsample.
fn upsample_taps(len: usize, mode: UpsampleMode) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| match mode {
            UpsampleMode::Nearest => (o / 2, o / 2, 0.0),
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            }
        })
        .collect()
}

pub(crate) fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<f64> {
    let ty = upsample_taps(h, mode);
    let tx = upsample_taps(w, mode);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * wo + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<f64> {
    let ty = upsample_taps(h, mode);
    let tx = upsample_taps(w, mode);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                dst[y0 * w + x1] += (1.0 - fy) * fx * g;
                dst[y1 * w + x0] += fy * (1.0 - fx) * g;
                dst[y1 * w + x1] += fy * fx * g;
            }
        }
    }
    dx
}

/// Per-channel batch statistics over `(n, h, w)`: returns `(mean, biased var)`.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            s += x[start..start + plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            v += x[start..start + plane].iter().map(|e| (e - m) * (e - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Row-wise softmax over the last axis with max subtraction.
pub(crate) fn softmax_rows_forward(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((ys, dys), dxs) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = ys.iter().zip(dys).map(|(a, b)| a * b).sum();
        for ((d, yv), g) in dxs.iter_mut().zip(ys).zip(dys) {
            *d = yv * (g - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_respects_transposed_strides() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; a·bᵀ = [[17,23],[39,53]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (1, 2), 0.0, &mut c, (2, 1));
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn bilinear_taps_at_borders() {
        let taps = upsample_taps(3, UpsampleMode::Bilinear);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[5], (2, 2, 0.25));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}

