//! Slice-level forward and adjoint kernels used by the tape.
//!
//! Layouts are row-major, channels first. Every `*_backward` accumulates
//! into its output buffers instead of overwriting them.

use crate::tensor::{gemm, Real};

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
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `out` is `[c_out, oh, ow]`.
pub fn conv2d<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let npix = g.out_h() * g.out_w();
    let k = g.patch();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    if pointwise {
        gemm(g.c_out, k, npix, w, false, x, false, out, false);
    } else {
        let mut cols = vec![T::zero(); k * npix];
        im2col(g, x, &mut cols);
        gemm(g.c_out, k, npix, w, false, &cols, false, out, false);
    }
    if let Some(b) = b {
        for (row, &bias) in out.chunks_mut(npix).zip(b) {
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
}

/// Adjoint of [`conv2d`]. Any of the gradient buffers may be skipped.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let npix = g.out_h() * g.out_w();
    let k = g.patch();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    if let Some(db) = db {
        for (d, row) in db.iter_mut().zip(dout.chunks(npix)) {
            *d += row.iter().copied().sum::<T>();
        }
    }
    if pointwise {
        if let Some(dw) = dw {
            gemm(g.c_out, npix, k, dout, false, x, true, dw, true);
        }
        if let Some(dx) = dx {
            gemm(k, g.c_out, npix, w, true, dout, false, dx, true);
        }
        return;
    }
    if let Some(dw) = dw {
        let mut cols = vec![T::zero(); k * npix];
        im2col(g, x, &mut cols);
        gemm(g.c_out, npix, k, dout, false, &cols, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * npix];
        gemm(k, g.c_out, npix, w, true, dout, false, &mut dcols, false);
        col2im(g, &dcols, dx);
    }
}

/// Valid output range `[lo, hi)` for an input offset `d = k - pad`.
#[inline]
fn shifted_range(d: isize, n: usize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(n);
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// Per-channel `k x k` convolution, stride 1, "same" zero padding.
pub fn depthwise<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    x: &[T],
    wt: &[T],
    b: Option<&[T]>,
    out: &mut [T],
) {
    let pad = (k / 2) as isize;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        let bias = b.map_or(T::zero(), |b| b[ch]);
        dst.iter_mut().for_each(|v| *v = bias);
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = shifted_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = shifted_range(dx, w);
                let wv = wt[(ch * k + ky) * k + kx];
                if wv == T::zero() || x0 == x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let row = &mut dst[y * w..(y + 1) * w];
                    let ix0 = (x0 as isize + dx) as usize;
                    for (o, &s) in row[x0..x1].iter_mut().zip(&src[ix0..ix0 + (x1 - x0)]) {
                        *o += wv * s;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    x: &[T],
    wt: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let pad = (k / 2) as isize;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let g = &dout[ch * h * w..(ch + 1) * h * w];
        if let Some(db) = db.as_deref_mut() {
            db[ch] += g.iter().copied().sum::<T>();
        }
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = shifted_range(dy, h);
            for kx in 0..k {
                let ddx = kx as isize - pad;
                let (x0, x1) = shifted_range(ddx, w);
                if x0 == x1 {
                    continue;
                }
                let widx = (ch * k + ky) * k + kx;
                let wv = wt[widx];
                let mut acc = T::zero();
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let ix0 = (x0 as isize + ddx) as usize;
                    let grow = &g[y * w + x0..y * w + x1];
                    if dw.is_some() {
                        let src = &plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        acc += grow.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dst = &mut dx[ch * h * w + iy * w + ix0..][..x1 - x0];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Source taps `(i0, i1, w0, w1)` for one output coordinate of an
/// align-corners-false bilinear resize by an integer factor.
pub fn bilinear_taps<T: Real>(n_in: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    let scale = 1.0 / factor as f64;
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            (i0, i1, T::lit(1.0 - l), T::lit(l))
        })
        .collect()
}

pub fn upsample<T: Real>(c: usize, h: usize, w: usize, factor: usize, x: &[T], out: &mut [T]) {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
}

pub fn upsample_backward<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dout: &[T],
    dx: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for ch in 0..c {
        let g = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * w + x0] += gv * wy0 * wx0;
                dst[y0 * w + x1] += gv * wy0 * wx1;
                dst[y1 * w + x0] += gv * wy1 * wx0;
                dst[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
}

/// Softmax over the middle axis of an `[outer, n, inner]` view.
pub fn softmax<T: Real>(outer: usize, n: usize, inner: usize, x: &[T], out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
}

pub fn softmax_backward<T: Real>(
    outer: usize,
    n: usize,
    inner: usize,
    y: &[T],
    dy: &[T],
    dx: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Mean and reciprocal standard deviation of each length-`c` row.
pub fn row_moments<T: Real>(x: &[T], c: usize, eps: T) -> Vec<(T, T)> {
    let cn = T::from_usize(c).unwrap();
    x.chunks(c)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            (mean, (var + eps).sqrt().recip())
        })
        .collect()
}

pub fn layer_norm<T: Real>(x: &[T], c: usize, gain: &[T], shift: &[T], eps: T, out: &mut [T]) {
    for ((row, dst), (mean, rstd)) in x
        .chunks(c)
        .zip(out.chunks_mut(c))
        .zip(row_moments(x, c, eps))
    {
        for j in 0..c {
            dst[j] = (row[j] - mean) * rstd * gain[j] + shift[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    c: usize,
    gain: &[T],
    eps: T,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dshift: Option<&mut [T]>,
) {
    let cn = T::from_usize(c).unwrap();
    let mut xhat = vec![T::zero(); c];
    let mut gh = vec![T::zero(); c];
    for (r, (mean, rstd)) in row_moments(x, c, eps).into_iter().enumerate() {
        let row = &x[r * c..(r + 1) * c];
        let g = &dout[r * c..(r + 1) * c];
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            gh[j] = g[j] * gain[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..c {
                dg[j] += g[j] * xhat[j];
            }
        }
        if let Some(ds) = dshift.as_deref_mut() {
            for j in 0..c {
                ds[j] += g[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let m1 = gh.iter().copied().sum::<T>() / cn;
            let m2 = gh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cn;
            let dst = &mut dx[r * c..(r + 1) * c];
            for j in 0..c {
                dst[j] += rstd * (gh[j] - m1 - xhat[j] * m2);
            }
        }
    }
}
