//! Windowed SSIM on single planes in the 0..255 range, with its gradient.
//!
//! Local statistics use an 11x11 Gaussian window (sigma 1.5) evaluated only
//! where the window fits inside the plane.

use crate::error::{invalid, Result};

pub const SSIM_C1: f64 = 6.5025;
pub const SSIM_C2: f64 = 58.5225;
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

struct Filter {
    taps: Vec<f64>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Filter {
    fn new(h: usize, w: usize) -> Result<Self> {
        if h < WINDOW || w < WINDOW {
            return Err(invalid!("SSIM needs planes of at least {WINDOW}x{WINDOW}, got {h}x{w}"));
        }
        Ok(Filter {
            taps: gaussian_taps(WINDOW, WINDOW_SIGMA),
            h,
            w,
            oh: h - WINDOW + 1,
            ow: w - WINDOW + 1,
        })
    }

    /// Valid-mode separable filtering, rows then columns.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut rows = vec![0.0; self.h * self.ow];
        for y in 0..self.h {
            for ox in 0..self.ow {
                let mut acc = 0.0;
                for (u, t) in self.taps.iter().enumerate() {
                    acc += t * x[y * self.w + ox + u];
                }
                rows[y * self.ow + ox] = acc;
            }
        }
        let mut out = vec![0.0; self.oh * self.ow];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let mut acc = 0.0;
                for (u, t) in self.taps.iter().enumerate() {
                    acc += t * rows[(oy + u) * self.ow + ox];
                }
                out[oy * self.ow + ox] = acc;
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut rows = vec![0.0; self.h * self.ow];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let v = g[oy * self.ow + ox];
                for (u, t) in self.taps.iter().enumerate() {
                    rows[(oy + u) * self.ow + ox] += t * v;
                }
            }
        }
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for ox in 0..self.ow {
                let v = rows[y * self.ow + ox];
                for (u, t) in self.taps.iter().enumerate() {
                    out[y * self.w + ox + u] += t * v;
                }
            }
        }
        out
    }
}

/// `(d/da, d/db)` of a scalar with respect to two planes.
pub type PlaneGrads = (Vec<f64>, Vec<f64>);

/// Mean SSIM of two `h x w` planes, plus `d mean / d a` and `d mean / d b`
/// when `with_grad` is set.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, with_grad: bool) -> Result<(f64, Option<PlaneGrads>)> {
    let f = Filter::new(h, w)?;
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let ma = f.apply(a);
    let mb = f.apply(b);
    let eaa = f.apply(&sq(a, a));
    let ebb = f.apply(&sq(b, b));
    let eab = f.apply(&sq(a, b));
    let m = ma.len();
    let inv_m = 1.0 / m as f64;

    let mut total = 0.0;
    let (mut g_ma, mut g_mb, mut g_eaa, mut g_ebb, mut g_eab) = if with_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        Default::default()
    };
    for i in 0..m {
        let (mx, my) = (ma[i], mb[i]);
        let sxx = eaa[i] - mx * mx;
        let syy = ebb[i] - my * my;
        let sxy = eab[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if with_grad {
            let d_a1 = a2 / (b1 * b2) * inv_m;
            let d_a2 = a1 / (b1 * b2) * inv_m;
            let d_b1 = -s / b1 * inv_m;
            let d_b2 = -s / b2 * inv_m;
            // a2 depends on sxy = eab - mx my, b2 on sxx = eaa - mx^2 (same for y)
            g_ma[i] = d_a1 * 2.0 * my + d_b1 * 2.0 * mx - d_a2 * 2.0 * my - d_b2 * 2.0 * mx;
            g_mb[i] = d_a1 * 2.0 * mx + d_b1 * 2.0 * my - d_a2 * 2.0 * mx - d_b2 * 2.0 * my;
            g_eaa[i] = d_b2;
            g_ebb[i] = d_b2;
            g_eab[i] = 2.0 * d_a2;
        }
    }
    let mean = total * inv_m;
    if !with_grad {
        return Ok((mean, None));
    }
    let t_ma = f.adjoint(&g_ma);
    let t_mb = f.adjoint(&g_mb);
    let t_eaa = f.adjoint(&g_eaa);
    let t_ebb = f.adjoint(&g_ebb);
    let t_eab = f.adjoint(&g_eab);
    let ga = (0..a.len())
        .map(|p| t_ma[p] + 2.0 * a[p] * t_eaa[p] + b[p] * t_eab[p])
        .collect();
    let gb = (0..b.len())
        .map(|p| t_mb[p] + 2.0 * b[p] * t_ebb[p] + a[p] * t_eab[p])
        .collect();
    Ok((mean, Some((ga, gb))))
}
