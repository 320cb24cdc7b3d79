use crate::bpp::{Bpp, FluxObserver, Pass};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Mean L2 norm of the residual delivered to each flux unit, scaled so the
/// largest entry is exactly 100.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHeatmap {
    pub levels: usize,
    pub depth: usize,
    /// Row-major, one row per level (level 1 first), one column per block.
    pub values: Vec<f64>,
}

impl ResidualHeatmap {
    pub fn get(&self, level: usize, block: usize) -> f64 {
        self.values[(level - 1) * self.depth + block - 1]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// One CSV line per level, `depth` comma-separated values each.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.depth) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Grayscale rendering with `cell x cell` pixels per unit, level 1 on top.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let (w, h) = (self.depth * cell, self.levels * cell);
        let px: Vec<f64> = (0..h * w)
            .map(|i| self.values[(i / w / cell) * self.depth + (i % w) / cell] / 100.0)
            .collect();
        crate::image_io::pgm_encode(w, h, &px)
    }
}

struct NormSum {
    depth: usize,
    sums: Vec<f64>,
}

impl<T: Scalar> FluxObserver<T> for NormSum {
    fn residual(&mut self, level: usize, block: usize, e_in: &Tensor<T>) {
        self.sums[(level - 1) * self.depth + block - 1] += e_in.norm_l2();
    }
}

/// Averages residual norms over `images` and normalizes the maximum to 100.
pub fn residual_heatmap<T: Scalar>(net: &Bpp<T>, images: &[Tensor<T>]) -> Result<ResidualHeatmap> {
    if images.is_empty() {
        return Err(invalid!("residual heatmap needs at least one image"));
    }
    let (levels, depth) = (net.config.levels, net.config.depth);
    let mut acc = NormSum {
        depth,
        sums: vec![0.0; levels * depth],
    };
    for img in images {
        let mut pass = Pass::new(net, false).observe(&mut acc);
        let x = pass.tape.constant(img.clone());
        pass.run(x)?;
    }
    let n = images.len() as f64;
    let mut values: Vec<f64> = acc.sums.iter().map(|s| s / n).collect();
    // first occurrence of the maximum is pinned to exactly 100
    let (arg, max) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) });
    if max > 0.0 {
        for v in values.iter_mut() {
            *v = *v / max * 100.0;
        }
        values[arg] = 100.0;
    }
    Ok(ResidualHeatmap { levels, depth, values })
}
