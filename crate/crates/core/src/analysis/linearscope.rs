use std::collections::BTreeMap;

use crate::bpp::{Bpp, FrozenOp, Pass, UnitId};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};
use crate::Scalar;

/// A network with every ReLU mask and instance-norm statistic fixed to the
/// values seen on one probe input. Its forward map is affine: `y = F v + r`.
#[derive(Clone, Debug)]
pub struct FrozenNet<'a, T> {
    pub net: &'a Bpp<T>,
    pub ops: Vec<FrozenOp<T>>,
    pub probe_shape: Shape,
}

impl<T: Scalar> FrozenNet<'_, T> {
    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        frozen_forward(self, v)
    }

    /// Share of ones over all ReLU masks of each flux unit, in unit order.
    pub fn mask_fractions(&self) -> Vec<(UnitId, f64)> {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for op in &self.ops {
            if let FrozenOp::Relu { unit, mask } = op {
                let e = acc.entry((unit.block, unit.level)).or_default();
                e.0 += mask.sum().as_f64();
                e.1 += mask.len();
            }
        }
        acc.into_iter()
            .map(|((block, level), (ones, n))| (UnitId { level, block }, ones / n as f64))
            .collect()
    }
}

/// Runs `probe` once and records the action of every non-linearity.
pub fn capture<'a, T: Scalar>(net: &'a Bpp<T>, probe: &Tensor<T>) -> Result<FrozenNet<'a, T>> {
    let mut pass = Pass::new(net, false).capturing();
    let x = pass.tape.constant(probe.clone());
    pass.run(x)?;
    Ok(FrozenNet {
        net,
        ops: pass.into_capture(),
        probe_shape: probe.shape(),
    })
}

/// The network with masks and statistics held fixed.
pub fn frozen_forward<T: Scalar>(frozen: &FrozenNet<'_, T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.shape() != frozen.probe_shape {
        return Err(shape_err!(
            "frozen network expects {:?}, got {:?}",
            frozen.probe_shape,
            v.shape()
        ));
    }
    let mut pass = Pass::new(frozen.net, false).replaying(&frozen.ops);
    let x = pass.tape.constant(v.clone());
    let y = pass.run(x)?;
    Ok(pass.tape.value(y).clone())
}

/// `forward(x) = fx + r`, with `r` the output of the frozen network on a zero image.
#[derive(Clone, Debug)]
pub struct Decomposition<T> {
    pub fx: Tensor<T>,
    pub r: Tensor<T>,
}

pub fn decompose<T: Scalar>(net: &Bpp<T>, x: &Tensor<T>) -> Result<Decomposition<T>> {
    let frozen = capture(net, x)?;
    let r = frozen_forward(&frozen, &Tensor::zeros(x.shape()))?;
    let fx = frozen_forward(&frozen, x)?.sub(&r)?;
    Ok(Decomposition { fx, r })
}
