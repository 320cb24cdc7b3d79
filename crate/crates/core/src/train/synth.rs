//! Procedural ground-truth images: smooth gradients overlaid with flat
//! shapes and striped textures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::Scalar;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Seed of image `index` in a synthetic corpus generated from `seed`.
pub fn corpus_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index)
}

/// Deterministic `(1, 3, h, w)` image with values in [0, 1].
pub fn synth_image<T: Scalar>(seed: u64, h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 16 || w < 16 {
        return Err(invalid!("synthetic images need at least 16x16, got {h}x{w}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let mut img = vec![[0.0f64; 3]; h * w];

    // background: linear blend between two colors along a random direction
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (dy, dx) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * ((y as f64 / hf - 0.5) * dy + (x as f64 / wf - 0.5) * dx) * std::f64::consts::SQRT_2;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[y * w + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.random_range(2..=6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random::<f64>() * hf;
        let cx = rng.random::<f64>() * wf;
        let ry = (0.1 + 0.3 * rng.random::<f64>()) * hf;
        let rx = (0.1 + 0.3 * rng.random::<f64>()) * wf;
        match rng.random_range(0..3) {
            0 => {
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - cy).abs() <= ry && (x as f64 - cx).abs() <= rx {
                            img[y * w + x] = col;
                        }
                    }
                }
            }
            1 => {
                for y in 0..h {
                    for x in 0..w {
                        let u = (y as f64 - cy) / ry;
                        let v = (x as f64 - cx) / rx;
                        if u * u + v * v <= 1.0 {
                            img[y * w + x] = col;
                        }
                    }
                }
            }
            _ => {
                // hard-edged stripes inside a box
                let period = rng.random_range(3.0..10.0);
                let phi: f64 = rng.random::<f64>() * std::f64::consts::PI;
                let (sy, sx) = phi.sin_cos();
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - cy).abs() <= ry && (x as f64 - cx).abs() <= rx {
                            let d = y as f64 * sy + x as f64 * sx;
                            if (d / period).rem_euclid(1.0) < 0.5 {
                                img[y * w + x] = col;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        T::of(img[y * w + x][c].clamp(0.0, 1.0))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_image::<f32>(5, 32, 40).unwrap();
        assert_eq!(a, synth_image::<f32>(5, 32, 40).unwrap());
        assert_ne!(a, synth_image::<f32>(6, 32, 40).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_image::<f32>(0, 15, 40).is_err());
    }

    #[test]
    fn has_sharp_edges() {
        for seed in 0..20 {
            let a = synth_image::<f64>(seed, 32, 32).unwrap();
            let max_step = (0..3)
                .flat_map(|c| (0..32).flat_map(move |y| (1..32).map(move |x| (c, y, x))))
                .map(|(c, y, x)| (a.at(0, c, y, x) - a.at(0, c, y, x - 1)).abs())
                .fold(0.0, f64::max);
            assert!(max_step > 0.05, "seed {seed}: {max_step}");
        }
    }

    #[test]
    fn mean_over_seeds() {
        let mean: f64 = (0..100)
            .map(|s| synth_image::<f64>(s, 32, 32).unwrap().mean())
            .sum::<f64>()
            / 100.0;
        assert!((0.2..=0.8).contains(&mean), "{mean}");
    }
}
