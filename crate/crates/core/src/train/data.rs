//! Degradation pairs and patch sampling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{corpus_seed, synth_image};
use crate::error::{invalid, shape_err, Error, Result};
use crate::image_io::ppm_read;
use crate::resample::degrade;
use crate::tensor::Tensor;
use crate::Scalar;

/// Where ground-truth images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        seed: u64,
        count: usize,
        size: usize,
    },
    /// Every `.ppm` file in the directory, in file-name order.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub factors: Vec<usize>,
    /// Fraction of images held out for validation (at least one is).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// A ground-truth image and its impaired versions, one per factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub gt: Tensor<T>,
    pub impaired: Vec<(usize, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub factors: Vec<usize>,
    pub train: Vec<Pair<T>>,
    pub val: Vec<Pair<T>>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of `factors` times `alignment`.
pub fn crop_multiple(factors: &[usize], alignment: usize) -> usize {
    factors.iter().fold(alignment, |m, &f| m / gcd(m, f) * f)
}

impl DatasetSpec {
    pub fn synthetic(seed: u64, count: usize, size: usize, factors: &[usize]) -> Self {
        DatasetSpec {
            source: DataSource::Synthetic { seed, count, size },
            factors: factors.to_vec(),
            val_fraction: default_val_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(invalid!("dataset needs at least one factor"));
        }
        if let Some(f) = self.factors.iter().find(|f| ![2, 3, 4, 8].contains(*f)) {
            return Err(invalid!("factor {f} not in {{2, 3, 4, 8}}"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid!("val_fraction must be in (0, 1)"));
        }
        if let DataSource::Synthetic { count, size, .. } = self.source {
            if count < 2 {
                return Err(invalid!("need at least 2 images for a validation split, got {count}"));
            }
            if size < 16 {
                return Err(invalid!("synthetic size must be >= 16"));
            }
        }
        Ok(())
    }
}

fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads or generates ground truth, crops each image to a multiple of
/// `lcm(factors) * alignment` and degrades it at every factor.
pub fn make_pairs<T: Scalar>(spec: &DatasetSpec, alignment: usize) -> Result<Dataset<T>> {
    spec.validate()?;
    let gts: Vec<Tensor<T>> = match &spec.source {
        DataSource::Synthetic { seed, count, size } => (0..*count as u64)
            .map(|i| synth_image(corpus_seed(*seed, i), *size, *size))
            .collect::<Result<_>>()?,
        DataSource::Directory(dir) => list_ppm(dir)?.iter().map(ppm_read).collect::<Result<_>>()?,
    };
    if gts.len() < 2 {
        return Err(invalid!(
            "need at least 2 images for a validation split, found {}",
            gts.len()
        ));
    }
    let m = crop_multiple(&spec.factors, alignment);
    let pairs = gts
        .into_iter()
        .enumerate()
        .map(|(i, gt)| {
            let s = gt.shape();
            let (h, w) = (s.h / m * m, s.w / m * m);
            if h == 0 || w == 0 {
                return Err(shape_err!(
                    "image {i} ({}x{}) is smaller than the crop multiple {m}",
                    s.h,
                    s.w
                ));
            }
            let gt = gt.crop(0, 0, h, w)?;
            let impaired = spec
                .factors
                .iter()
                .map(|&f| Ok((f, degrade(&gt, f)?)))
                .collect::<Result<_>>()?;
            Ok(Pair { gt, impaired })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_val = ((pairs.len() as f64 * spec.val_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let mut train = pairs;
    let val = train.split_off(train.len() - n_val);
    Ok(Dataset {
        factors: spec.factors.clone(),
        train,
        val,
    })
}

/// One of the eight flips/rotations of a square patch.
fn dihedral<T: Scalar>(t: &Tensor<T>, code: u8) -> Tensor<T> {
    if code == 0 {
        return t.clone();
    }
    let s = t.shape();
    let last = s.h - 1;
    Tensor::from_fn(s, |n, c, y, x| {
        let (mut sy, mut sx) = (y, x);
        if code & 4 != 0 {
            (sy, sx) = (sx, sy);
        }
        if code & 1 != 0 {
            sx = last - sx;
        }
        if code & 2 != 0 {
            sy = last - sy;
        }
        t.at(n, c, sy, sx)
    })
}

/// Patch sampling parameters.
#[derive(Clone, Copy, Debug)]
pub struct BatchSpec {
    pub batch: usize,
    pub patch: usize,
    pub augment: bool,
    pub seed: u64,
}

/// `(input, target)` patches for `step`, each of shape `(batch, 3, patch, patch)`.
///
/// The random stream is keyed by `(seed, step)`, so any step can be
/// reproduced without replaying earlier ones.
pub fn sample_batch<T: Scalar>(data: &Dataset<T>, spec: &BatchSpec, step: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    if data.train.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    let p = spec.patch;
    if let Some(pair) = data.train.iter().find(|q| q.gt.shape().h < p || q.gt.shape().w < p) {
        let s = pair.gt.shape();
        return Err(shape_err!("patch {p} is larger than a {}x{} training image", s.h, s.w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(step);
    let mut inputs = Vec::with_capacity(spec.batch);
    let mut targets = Vec::with_capacity(spec.batch);
    for _ in 0..spec.batch {
        let pair = &data.train[rng.random_range(0..data.train.len())];
        let (_, impaired) = &pair.impaired[rng.random_range(0..pair.impaired.len())];
        let s = pair.gt.shape();
        let y = rng.random_range(0..=s.h - p);
        let x = rng.random_range(0..=s.w - p);
        let code = if spec.augment { rng.random_range(0..8u8) } else { 0 };
        inputs.push(dihedral(&impaired.crop(y, x, p, p)?, code));
        targets.push(dihedral(&pair.gt.crop(y, x, p, p)?, code));
    }
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Dataset<f64> {
        make_pairs(&DatasetSpec::synthetic(seed, 5, 36, &[2]), 4).unwrap()
    }

    #[test]
    fn sizes_and_crop() {
        let d = tiny(1);
        assert_eq!(d.len(), 5);
        assert_eq!((d.train.len(), d.val.len()), (4, 1));
        for p in d.train.iter().chain(&d.val) {
            assert_eq!(p.gt.shape().as_array(), [1, 3, 36, 36]);
            assert_eq!(p.impaired[0].1.shape(), p.gt.shape());
        }
        assert_eq!(crop_multiple(&[2, 3, 4, 8], 8), 24);
        let d: Dataset<f64> = make_pairs(&DatasetSpec::synthetic(1, 3, 40, &[3]), 4).unwrap();
        assert_eq!(d.val[0].gt.shape().h, 36);
    }

    #[test]
    fn spec_validation() {
        assert!(make_pairs::<f32>(&DatasetSpec::synthetic(0, 1, 32, &[2]), 1).is_err());
        assert!(make_pairs::<f32>(&DatasetSpec::synthetic(0, 4, 32, &[5]), 1).is_err());
        assert!(make_pairs::<f32>(&DatasetSpec::synthetic(0, 4, 32, &[]), 1).is_err());
        let e = make_pairs::<f32>(
            &DatasetSpec {
                source: DataSource::Directory("/nonexistent/bpp".into()),
                factors: vec![2],
                val_fraction: 0.1,
            },
            1,
        )
        .unwrap_err();
        assert!(e.to_string().contains("/nonexistent/bpp"));
    }

    #[test]
    fn batches_are_reproducible() {
        let d = tiny(2);
        let spec = BatchSpec {
            batch: 3,
            patch: 16,
            augment: true,
            seed: 9,
        };
        let a = sample_batch(&d, &spec, 7).unwrap();
        assert_eq!(a, sample_batch(&d, &spec, 7).unwrap());
        assert_ne!(a.0, sample_batch(&d, &spec, 8).unwrap().0);
        assert_eq!(a.0.shape().as_array(), [3, 3, 16, 16]);
        let big = BatchSpec { patch: 40, ..spec };
        assert!(sample_batch(&d, &big, 0).is_err());
    }

    #[test]
    fn augmentation_preserves_pixels_and_alignment() {
        let mut d = tiny(3);
        for p in &mut d.train {
            p.impaired[0].1 = p.gt.clone();
        }
        let spec = BatchSpec {
            batch: 8,
            patch: 12,
            augment: true,
            seed: 1,
        };
        let (x, y) = sample_batch(&d, &spec, 0).unwrap();
        assert_eq!(x, y);
        let t = Tensor::<f64>::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f64);
        let mut base: Vec<i64> = t.data().iter().map(|&v| v as i64).collect();
        base.sort();
        let mut seen = std::collections::HashSet::new();
        for code in 0..8 {
            let r = dihedral(&t, code);
            let mut v: Vec<i64> = r.data().iter().map(|&v| v as i64).collect();
            seen.insert(v.clone());
            v.sort();
            assert_eq!(v, base);
        }
        assert_eq!(seen.len(), 8);
    }
}
