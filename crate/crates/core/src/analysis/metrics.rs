use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ssim::ssim_plane;
use crate::tensor::Tensor;
use crate::Scalar;

/// Which planes the metrics compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricMode {
    /// Every channel.
    Rgb,
    /// Studio-range luma, `16 + 65.481 R + 128.553 G + 24.966 B` (Matlab `rgb2ycbcr`).
    YM,
    /// Full-range luma, `255 (0.299 R + 0.587 G + 0.114 B)`.
    YP,
}

impl FromStr for MetricMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(MetricMode::Rgb),
            "y_m" => Ok(MetricMode::YM),
            "y_p" => Ok(MetricMode::YP),
            _ => Err(invalid!("unknown metric mode {s:?} (rgb, y_m, y_p)")),
        }
    }
}

/// Luma plane of sample `n` on the 0..255 scale.
pub fn luma<T: Scalar>(img: &Tensor<T>, n: usize, mode: MetricMode) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(shape_err!("luma needs 3 channels, got {}", s.c));
    }
    let (r, g, b) = (img.plane(n, 0), img.plane(n, 1), img.plane(n, 2));
    let f = |(r, g, b): (f64, f64, f64)| match mode {
        MetricMode::YM => 16.0 + 65.481 * r + 128.553 * g + 24.966 * b,
        _ => 255.0 * (0.299 * r + 0.587 * g + 0.114 * b),
    };
    Ok((0..s.plane())
        .map(|i| f((r[i].as_f64(), g[i].as_f64(), b[i].as_f64())))
        .collect())
}

fn planes<T: Scalar>(img: &Tensor<T>, mode: MetricMode) -> Result<Vec<Vec<f64>>> {
    let s = img.shape();
    let mut out = Vec::new();
    for n in 0..s.n {
        match mode {
            MetricMode::Rgb => {
                for c in 0..s.c {
                    out.push(img.plane(n, c).iter().map(|v| v.as_f64() * 255.0).collect());
                }
            }
            _ => out.push(luma(img, n, mode)?),
        }
    }
    Ok(out)
}

type Planes = Vec<Vec<f64>>;

fn paired<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: MetricMode) -> Result<(Planes, Planes)> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok((planes(a, mode)?, planes(b, mode)?))
}

/// Mean squared error on the 0..255 scale over all compared planes.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: MetricMode) -> Result<f64> {
    let (pa, pb) = paired(a, b, mode)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            acc += (u - v) * (u - v);
        }
        count += x.len();
    }
    Ok(acc / count as f64)
}

/// `10 log10(255^2 / mse)`; `+inf` when the inputs are identical.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: MetricMode) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, mode)?))
}

/// Mean of the 11x11 Gaussian-windowed SSIM map, averaged over planes.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: MetricMode) -> Result<f64> {
    let (pa, pb) = paired(a, b, mode)?;
    let s = a.shape();
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        total += ssim_plane(x, y, s.h, s.w, false)?.0;
    }
    Ok(total / pa.len() as f64)
}
