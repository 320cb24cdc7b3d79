//! Bicubic resampling and the classical iterative back-projection loop.
//!
//! Resizing follows the usual "bicubic scaler" conventions of SR benchmarks:
//! Keys cubic with `a = -0.5`, pixel centers at half-integer positions,
//! clamp-to-edge borders, and a kernel stretched by the scale ratio when
//! shrinking so the result is antialiased. Weights for each output sample
//! are normalized to sum to one.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub const KEYS_A: f64 = -0.5;

/// Keys' cubic convolution kernel.
pub fn keys_cubic(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse resampling matrix along one axis: for each output sample, the
/// input indices it reads and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    fn normalized(in_len: usize, mut taps: Vec<Vec<(usize, f64)>>) -> Self {
        for row in &mut taps {
            let s: f64 = row.iter().map(|t| t.1).sum();
            for t in row.iter_mut() {
                t.1 /= s;
            }
        }
        AxisWeights { in_len, taps }
    }
}

/// Bicubic interpolation kernel with Keys parameter `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BicubicKernel {
    pub a: f64,
}

impl Default for BicubicKernel {
    fn default() -> Self {
        BicubicKernel { a: KEYS_A }
    }
}

impl BicubicKernel {
    pub fn eval(&self, t: f64) -> f64 {
        keys_cubic(t, self.a)
    }

    /// Weights for resizing an axis of `in_len` samples to `out_len`.
    pub fn resize_weights(&self, in_len: usize, out_len: usize) -> AxisWeights {
        let scale = out_len as f64 / in_len as f64;
        // shrinking stretches the kernel by 1/scale
        let stretch = if scale < 1.0 { scale } else { 1.0 };
        let half_width = 2.0 / stretch;
        let taps = (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let left = (u - half_width).floor() as i64;
                let right = (u + half_width).ceil() as i64;
                let mut row: Vec<(usize, f64)> = Vec::new();
                for j in left..=right {
                    let wv = self.eval((u - j as f64) * stretch);
                    if wv == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, in_len as i64 - 1) as usize;
                    match row.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wv,
                        None => row.push((idx, wv)),
                    }
                }
                row
            })
            .collect();
        AxisWeights::normalized(in_len, taps)
    }

    /// Zero insertion by `factor` followed by interpolation with the kernel
    /// dilated by `factor`; input sample `m` lands on output `factor * m`.
    pub fn zero_insert_weights(&self, in_len: usize, factor: usize) -> AxisWeights {
        let f = factor as i64;
        let taps = (0..in_len * factor)
            .map(|n| {
                let n = n as i64;
                let mut row: Vec<(usize, f64)> = Vec::new();
                let m_lo = (n - 2 * f).div_euclid(f);
                let m_hi = (n + 2 * f).div_euclid(f);
                for m in m_lo..=m_hi {
                    let wv = self.eval((n - f * m) as f64 / f as f64);
                    if wv == 0.0 {
                        continue;
                    }
                    let idx = m.clamp(0, in_len as i64 - 1) as usize;
                    match row.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wv,
                        None => row.push((idx, wv)),
                    }
                }
                row
            })
            .collect();
        AxisWeights::normalized(in_len, taps)
    }

    /// Lowpass with the kernel dilated by `factor`, then keep every
    /// `factor`-th sample starting at 0.
    pub fn decimate_weights(&self, in_len: usize, factor: usize) -> AxisWeights {
        let f = factor as i64;
        let taps = (0..in_len / factor)
            .map(|i| {
                let center = f * i as i64;
                let mut row: Vec<(usize, f64)> = Vec::new();
                for d in (-2 * f)..=(2 * f) {
                    let wv = self.eval(d as f64 / f as f64);
                    if wv == 0.0 {
                        continue;
                    }
                    let idx = (center + d).clamp(0, in_len as i64 - 1) as usize;
                    match row.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wv,
                        None => row.push((idx, wv)),
                    }
                }
                row
            })
            .collect();
        AxisWeights::normalized(in_len, taps)
    }
}

/// Applies separable weights to every plane: rows (width) first, then columns.
pub fn apply_separable<T: Scalar>(img: &Tensor<T>, rows: &AxisWeights, cols: &AxisWeights) -> Result<Tensor<T>> {
    let s = img.shape();
    if rows.in_len != s.h || cols.in_len != s.w {
        return Err(shape_err!(
            "resampler expects {}x{} planes, got {}x{}",
            rows.in_len,
            cols.in_len,
            s.h,
            s.w
        ));
    }
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    let mut tmp = vec![0.0f64; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            for y in 0..s.h {
                for (ox, taps) in cols.taps.iter().enumerate() {
                    tmp[y * ow + ox] = taps.iter().map(|&(j, wv)| wv * src[y * s.w + j].as_f64()).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (oy, taps) in rows.taps.iter().enumerate() {
                for ox in 0..ow {
                    let v: f64 = taps.iter().map(|&(j, wv)| wv * tmp[j * ow + ox]).sum();
                    dst[oy * ow + ox] = T::of(v);
                }
            }
        }
    }
    Ok(out)
}

/// Separable bicubic resize of every plane to `out_h x out_w`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be at least 1x1, got {out_h}x{out_w}"));
    }
    let k = BicubicKernel::default();
    let s = img.shape();
    apply_separable(img, &k.resize_weights(s.h, out_h), &k.resize_weights(s.w, out_w))
}

/// 9x9 kernel for antialiased 2x downscaling by a stride-2 convolution
/// centered on even pixels; entries sum to one.
pub fn bicubic_down2_kernel9<T: Scalar>() -> Tensor<T> {
    let k = BicubicKernel::default();
    let taps: Vec<f64> = (-4..=4).map(|d| k.eval(d as f64 / 2.0)).collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / s).collect();
    Tensor::from_fn([1, 1, 9, 9], |_, _, y, x| T::of(taps[y] * taps[x]))
}

/// Bicubic downscale by `factor` followed by bicubic upscale back to the
/// original size: the standard SR degradation.
pub fn degrade<T: Scalar>(img: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if !matches!(factor, 2 | 3 | 4 | 8) {
        return Err(invalid!("degradation factor must be 2, 3, 4 or 8, got {factor}"));
    }
    let s = img.shape();
    if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(shape_err!(
            "image {}x{} is not divisible by factor {factor}; crop it first",
            s.h,
            s.w
        ));
    }
    let small = bicubic_resize(img, s.h / factor, s.w / factor)?;
    bicubic_resize(&small, s.h, s.w)
}

/// A linear map between images.
pub trait LinearOp<T: Scalar> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Upscaling `P`: zero insertion followed by the dilated bicubic kernel.
#[derive(Clone, Copy, Debug)]
pub struct ZeroInsertUpsampler {
    pub factor: usize,
    pub kernel: BicubicKernel,
}

/// Downscaling `R`: dilated bicubic lowpass followed by decimation.
#[derive(Clone, Copy, Debug)]
pub struct DecimatingDownsampler {
    pub factor: usize,
    pub kernel: BicubicKernel,
}

impl ZeroInsertUpsampler {
    pub fn bicubic(factor: usize) -> Self {
        ZeroInsertUpsampler {
            factor,
            kernel: BicubicKernel::default(),
        }
    }
}

impl DecimatingDownsampler {
    pub fn bicubic(factor: usize) -> Self {
        DecimatingDownsampler {
            factor,
            kernel: BicubicKernel::default(),
        }
    }
}

impl<T: Scalar> LinearOp<T> for ZeroInsertUpsampler {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        apply_separable(
            x,
            &self.kernel.zero_insert_weights(s.h, self.factor),
            &self.kernel.zero_insert_weights(s.w, self.factor),
        )
    }
}

impl<T: Scalar> LinearOp<T> for DecimatingDownsampler {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if !s.h.is_multiple_of(self.factor) || !s.w.is_multiple_of(self.factor) {
            return Err(shape_err!(
                "downsampler: {}x{} not divisible by {}",
                s.h,
                s.w,
                self.factor
            ));
        }
        apply_separable(
            x,
            &self.kernel.decimate_weights(s.h, self.factor),
            &self.kernel.decimate_weights(s.w, self.factor),
        )
    }
}

/// Linear back-projection problem: recover `h` with `R h = x`.
pub struct IbpProblem<'a, T: Scalar> {
    pub x: Tensor<T>,
    pub upscale: &'a dyn LinearOp<T>,
    pub downscale: &'a dyn LinearOp<T>,
    pub iters: usize,
}

#[derive(Clone, Debug)]
pub struct IbpOutcome<T> {
    pub h: Tensor<T>,
    /// `||x - R h^t||_2` for `t = 0..=iters`.
    pub residual_norms: Vec<f64>,
}

/// `h^0 = P x`, then `h^{t+1} = h^t + P (x - R h^t)`.
pub fn ibp_run<T: Scalar>(problem: &IbpProblem<'_, T>) -> Result<IbpOutcome<T>> {
    let p = problem.upscale;
    let r = problem.downscale;
    let mut h = p.apply(&problem.x)?;
    let mut residual_norms = Vec::with_capacity(problem.iters + 1);
    for t in 0..=problem.iters {
        let rh = r.apply(&h)?;
        if rh.shape() != problem.x.shape() {
            return Err(shape_err!(
                "R(P x) has shape {:?}, observation has {:?}",
                rh.shape(),
                problem.x.shape()
            ));
        }
        let e = problem.x.sub(&rh)?;
        residual_norms.push(e.norm_l2());
        if t == problem.iters {
            break;
        }
        let update = p.apply(&e)?;
        h.add_assign(&update)?;
    }
    Ok(IbpOutcome { h, residual_norms })
}
