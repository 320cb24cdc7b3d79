//! Inference on overlapping patches blended with a 2-D Hamming window.
//!
//! Each tile's output is weighted by the window and the weighted sum is
//! divided by the accumulated window weight at every pixel.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DEFAULT_STRIDE: usize = 16;

/// `w(i) = 0.54 - 0.46 cos(2 pi i / (N - 1))`.
pub fn hamming(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid!("Hamming window needs at least 2 samples, got {n}"));
    }
    let d = (n - 1) as f64;
    Ok((0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / d).cos())
        .collect())
}

/// Outer product of 1-D Hamming windows, shape `(1, 1, n, m)`.
pub fn hamming2d<T: Scalar>(n: usize, m: usize) -> Result<Tensor<T>> {
    let wy = hamming(n)?;
    let wx = hamming(m)?;
    Ok(Tensor::from_fn([1, 1, n, m], |_, _, y, x| T::of(wy[y] * wx[x])))
}

/// Tile grid over a reflect-padded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Top-left corners `(y, x)` in row-major order.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut o = 0;
    while o + patch < len {
        v.push(o);
        o += stride;
    }
    // last tile sits flush with the far edge
    v.push(len - patch);
    v.dedup();
    v
}

/// Plans tiles of `patch x patch` at `stride` over an `h x w` image.
/// Images smaller than a patch are padded up to it.
pub fn plan_tiles(h: usize, w: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if h == 0 || w == 0 || patch == 0 {
        return Err(invalid!("tile plan needs non-empty image and patch"));
    }
    if stride < 1 || stride > patch {
        return Err(invalid!(
            "stride {stride} must be in 1..={patch} (patch size) or tiles leave holes"
        ));
    }
    let (ph, pw) = (h.max(patch), w.max(patch));
    let ys = axis_origins(ph, patch, stride);
    let xs = axis_origins(pw, patch, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(TilePlan {
        patch,
        stride,
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
        origins,
    })
}

fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Extends every plane to `(ph, pw)` by mirroring about the last row/column.
pub fn reflect_pad<T: Scalar>(img: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if ph < s.h || pw < s.w {
        return Err(shape_err!("cannot pad {}x{} down to {ph}x{pw}", s.h, s.w));
    }
    Ok(Tensor::from_fn(s.with_spatial(ph, pw), |n, c, y, x| {
        img.at(n, c, reflect(y, s.h), reflect(x, s.w))
    }))
}

/// Applies `f` to every tile and blends the results.
///
/// Tiles may be evaluated in parallel; they are merged in plan order.
pub fn stitch<T, F>(f: F, image: &Tensor<T>, plan: &TilePlan) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let s = image.shape();
    if (s.h, s.w) != (plan.height, plan.width) {
        return Err(shape_err!(
            "plan is for {}x{}, image is {}x{}",
            plan.height,
            plan.width,
            s.h,
            s.w
        ));
    }
    let padded = reflect_pad(image, plan.padded_height, plan.padded_width)?;
    let window = hamming2d::<f64>(plan.patch, plan.patch)?;
    let outputs: Vec<Tensor<T>> = plan
        .origins
        .par_iter()
        .map(|&(y, x)| {
            let tile = padded.crop(y, x, plan.patch, plan.patch)?;
            let out = f(&tile)?;
            if out.shape() != tile.shape() {
                return Err(shape_err!(
                    "tile function changed shape {:?} -> {:?}",
                    tile.shape(),
                    out.shape()
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let (ph, pw) = (plan.padded_height, plan.padded_width);
    let mut num = vec![0.0f64; s.n * s.c * ph * pw];
    let mut den = vec![0.0f64; ph * pw];
    let wd = window.data();
    for (&(oy, ox), out) in plan.origins.iter().zip(&outputs) {
        for ty in 0..plan.patch {
            for tx in 0..plan.patch {
                den[(oy + ty) * pw + ox + tx] += wd[ty * plan.patch + tx];
            }
        }
        for n in 0..s.n {
            for c in 0..s.c {
                let src = out.plane(n, c);
                let base = (n * s.c + c) * ph * pw;
                for ty in 0..plan.patch {
                    for tx in 0..plan.patch {
                        let wv = wd[ty * plan.patch + tx];
                        num[base + (oy + ty) * pw + ox + tx] += wv * src[ty * plan.patch + tx].as_f64();
                    }
                }
            }
        }
    }
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let d = den[y * pw + x];
        T::of(num[(n * s.c + c) * ph * pw + y * pw + x] / d)
    }))
}
