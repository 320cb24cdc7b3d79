//! Plane-level correlation kernels shared by the forward and backward rules.
//!
//! Every kernel accumulates into its output in a fixed row-major order, so
//! results do not depend on how callers split work across threads.

use rayon::prelude::*;

use crate::Scalar;

/// Geometry of one plane-to-plane correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneGeom {
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PlaneGeom {
    /// Output columns `ox` whose tap `kx` lands inside the input row, and the
    /// input column of the first one.
    #[inline]
    fn col_range(&self, kx: usize) -> Option<(usize, usize, usize)> {
        // ix = ox * stride + kx - pad, need 0 <= ix < iw
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // ox * s + kx - pad <= iw - 1  =>  ox <= (iw - 1 + pad - kx) / s
        let hi_num = (self.iw + self.pad).checked_sub(kx + 1)?;
        let hi = (hi_num / s + 1).min(self.ow);
        if lo >= hi {
            return None;
        }
        Some((lo, hi, lo * s + kx - self.pad))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.ih).then_some(iy)
    }
}

/// `out[oy, ox] += sum_{ky,kx} kernel[ky, kx] * input[oy*s + ky - pad, ox*s + kx - pad]`
pub(crate) fn correlate_acc<T: Scalar>(out: &mut [T], input: &[T], kernel: &[T], g: PlaneGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let wv = kernel[ky * g.k + kx];
            if wv == T::zero() {
                continue;
            }
            let Some((ox0, ox1, ix0)) = g.col_range(kx) else {
                continue;
            };
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let orow = &mut out[oy * g.ow + ox0..oy * g.ow + ox1];
                let irow = &input[iy * g.iw..(iy + 1) * g.iw];
                if g.stride == 1 {
                    for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                        *o += wv * i;
                    }
                } else {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += wv * irow[ix0 + j * g.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate_acc`] with respect to its input:
/// scatters `grad_out` through `kernel` into `grad_in`.
pub(crate) fn correlate_adjoint_acc<T: Scalar>(grad_in: &mut [T], grad_out: &[T], kernel: &[T], g: PlaneGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let wv = kernel[ky * g.k + kx];
            if wv == T::zero() {
                continue;
            }
            let Some((ox0, ox1, ix0)) = g.col_range(kx) else {
                continue;
            };
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let grow = &grad_out[oy * g.ow + ox0..oy * g.ow + ox1];
                let irow = &mut grad_in[iy * g.iw..(iy + 1) * g.iw];
                if g.stride == 1 {
                    for (i, &o) in irow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                        *i += wv * o;
                    }
                } else {
                    for (j, &o) in grow.iter().enumerate() {
                        irow[ix0 + j * g.stride] += wv * o;
                    }
                }
            }
        }
    }
}

/// Gradient of [`correlate_acc`] with respect to the kernel, accumulated into `grad_k`.
pub(crate) fn correlate_kernel_grad_acc<T: Scalar>(grad_k: &mut [T], grad_out: &[T], input: &[T], g: PlaneGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let Some((ox0, ox1, ix0)) = g.col_range(kx) else {
                continue;
            };
            let mut acc = T::zero();
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let grow = &grad_out[oy * g.ow + ox0..oy * g.ow + ox1];
                let irow = &input[iy * g.iw..(iy + 1) * g.iw];
                if g.stride == 1 {
                    for (&o, &i) in grow.iter().zip(&irow[ix0..ix0 + grow.len()]) {
                        acc += o * i;
                    }
                } else {
                    for (j, &o) in grow.iter().enumerate() {
                        acc += o * irow[ix0 + j * g.stride];
                    }
                }
            }
            grad_k[ky * g.k + kx] += acc;
        }
    }
}

/// Sizes of a dense (all-to-all channel) convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub g: PlaneGeom,
}

/// Upper bound on the unfolded buffer, in elements; larger images are
/// processed in bands of output rows.
const BAND_ELEMS: usize = 1 << 20;

impl ConvDims {
    fn taps(&self) -> usize {
        self.c_in * self.g.k * self.g.k
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = (BAND_ELEMS / (self.taps() * self.g.ow).max(1)).clamp(1, self.g.oh);
        let oh = self.g.oh;
        (0..oh).step_by(rows).map(move |r0| (r0, (r0 + rows).min(oh)))
    }
}

/// Unfolds output rows `r0..r1` of one sample into `col`, one row of
/// `(r1 - r0) * ow` values per tap `(ci, ky, kx)`.
fn im2col<T: Scalar>(col: &mut [T], x: &[T], d: &ConvDims, r0: usize, r1: usize) {
    let g = d.g;
    let len = (r1 - r0) * g.ow;
    let plane = g.ih * g.iw;
    col.par_chunks_mut(len).enumerate().for_each(|(j, row)| {
        let (ci, ky, kx) = (j / (g.k * g.k), (j / g.k) % g.k, j % g.k);
        row.fill(T::zero());
        let Some((ox0, ox1, ix0)) = g.col_range(kx) else { return };
        let src = &x[ci * plane..(ci + 1) * plane];
        for oy in r0..r1 {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let dst = &mut row[(oy - r0) * g.ow + ox0..(oy - r0) * g.ow + ox1];
            let irow = &src[iy * g.iw..(iy + 1) * g.iw];
            if g.stride == 1 {
                dst.copy_from_slice(&irow[ix0..ix0 + (ox1 - ox0)]);
            } else {
                for (t, v) in dst.iter_mut().enumerate() {
                    *v = irow[ix0 + t * g.stride];
                }
            }
        }
    });
}

/// Adds the folded `col` (layout of [`im2col`]) into one sample's gradient.
fn col2im_acc<T: Scalar>(gx: &mut [T], col: &[T], d: &ConvDims, r0: usize, r1: usize) {
    let g = d.g;
    let len = (r1 - r0) * g.ow;
    let kk = g.k * g.k;
    gx.par_chunks_mut(g.ih * g.iw).enumerate().for_each(|(ci, dst)| {
        for t in 0..kk {
            let (ky, kx) = (t / g.k, t % g.k);
            let Some((ox0, ox1, ix0)) = g.col_range(kx) else {
                continue;
            };
            let row = &col[(ci * kk + t) * len..(ci * kk + t + 1) * len];
            for oy in r0..r1 {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let src = &row[(oy - r0) * g.ow + ox0..(oy - r0) * g.ow + ox1];
                let irow = &mut dst[iy * g.iw..(iy + 1) * g.iw];
                if g.stride == 1 {
                    for (i, &v) in irow[ix0..ix0 + src.len()].iter_mut().zip(src) {
                        *i += v;
                    }
                } else {
                    for (q, &v) in src.iter().enumerate() {
                        irow[ix0 + q * g.stride] += v;
                    }
                }
            }
        }
    });
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four independent partial sums in a fixed pattern
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out = bias + W * x` for NCHW data; `out` must be zeroed by the caller.
pub(crate) fn dense_forward<T: Scalar>(out: &mut [T], x: &[T], w: &[T], bias: Option<&[T]>, d: ConvDims) {
    let g = d.g;
    let (in_sz, out_plane) = (d.c_in * g.ih * g.iw, g.oh * g.ow);
    let taps = d.taps();
    let mut col = Vec::new();
    for n in 0..d.n {
        let xs = &x[n * in_sz..(n + 1) * in_sz];
        let os = &mut out[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for (r0, r1) in d.bands() {
            let len = (r1 - r0) * g.ow;
            col.resize(taps * len, T::zero());
            im2col(&mut col, xs, &d, r0, r1);
            os.par_chunks_mut(out_plane).enumerate().for_each(|(co, plane)| {
                let dst = &mut plane[r0 * g.ow..r1 * g.ow];
                if let Some(b) = bias {
                    dst.fill(b[co]);
                }
                let wr = &w[co * taps..(co + 1) * taps];
                for (j, &wv) in wr.iter().enumerate() {
                    if wv != T::zero() {
                        axpy(dst, wv, &col[j * len..(j + 1) * len]);
                    }
                }
            });
        }
    }
}

/// Accumulates `W^T * grad_out` (folded back to images) into `gx`.
pub(crate) fn dense_backward_input<T: Scalar>(gx: &mut [T], gout: &[T], w: &[T], d: ConvDims) {
    let g = d.g;
    let (in_sz, out_plane) = (d.c_in * g.ih * g.iw, g.oh * g.ow);
    let taps = d.taps();
    let mut col = Vec::new();
    for n in 0..d.n {
        let gs = &gout[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for (r0, r1) in d.bands() {
            let len = (r1 - r0) * g.ow;
            col.resize(taps * len, T::zero());
            col.par_chunks_mut(len).enumerate().for_each(|(j, row)| {
                row.fill(T::zero());
                for co in 0..d.c_out {
                    let wv = w[co * taps + j];
                    if wv != T::zero() {
                        axpy(row, wv, &gs[co * out_plane + r0 * g.ow..co * out_plane + r1 * g.ow]);
                    }
                }
            });
            col2im_acc(&mut gx[n * in_sz..(n + 1) * in_sz], &col, &d, r0, r1);
        }
    }
}

/// Accumulates `grad_out * unfold(x)^T` into `gw` (`c_out x taps`).
pub(crate) fn dense_backward_weight<T: Scalar>(gw: &mut [T], gout: &[T], x: &[T], d: ConvDims) {
    let g = d.g;
    let (in_sz, out_plane) = (d.c_in * g.ih * g.iw, g.oh * g.ow);
    let taps = d.taps();
    let mut col = Vec::new();
    for n in 0..d.n {
        let gs = &gout[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for (r0, r1) in d.bands() {
            let len = (r1 - r0) * g.ow;
            col.resize(taps * len, T::zero());
            im2col(&mut col, &x[n * in_sz..(n + 1) * in_sz], &d, r0, r1);
            gw.par_chunks_mut(taps).enumerate().for_each(|(co, gr)| {
                let go = &gs[co * out_plane + r0 * g.ow..co * out_plane + r1 * g.ow];
                for (j, acc) in gr.iter_mut().enumerate() {
                    *acc += dot(go, &col[j * len..(j + 1) * len]);
                }
            });
        }
    }
}
