//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value computed through it. Operations return [`Var`]
//! handles; node indices are assigned in execution order, so walking the
//! node list backwards is a valid reverse topological order.

mod check;
mod conv;

pub use check::{finite_diff_grad, relative_error};

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ssim;
use crate::tensor::{Shape, Tensor};
use crate::Scalar;

use conv::PlaneGeom;

pub const IN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-(sample, channel) instance-norm statistics, laid out `n * c + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        depthwise: bool,
    },
    ZeroInsert(Var),
    Relu(Var),
    MaskMul {
        input: Var,
        mask: Tensor<T>,
    },
    /// Covers both live instance norm (statistics depend on the input) and
    /// the replay variant with frozen statistics.
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        frozen: bool,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Sum(Var),
    L1(Var, Var),
    Mse(Var, Var),
    NegSsim {
        a: Var,
        b: Var,
        grad_a: Tensor<T>,
        grad_b: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf (zeros if nothing reached it).
    pub fn grad(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation with zero padding `(k - 1) / 2`.
    ///
    /// `weight` is `(c_out, c_in, k, k)`, or `(c, 1, k, k)` when `depthwise`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let k = ws.h;
        if ws.w != k || !(k == 3 || k == 9) {
            return Err(shape_err!("conv2d: kernel must be 3x3 or 9x9, got {}x{}", ws.h, ws.w));
        }
        if stride != 1 && stride != 2 {
            return Err(invalid!("conv2d: stride must be 1 or 2, got {stride}"));
        }
        if depthwise {
            if ws.c != 1 || ws.n != xs.c {
                return Err(shape_err!(
                    "conv2d (depthwise): weight {:?} needs (c_in={}, 1, k, k)",
                    ws,
                    xs.c
                ));
            }
        } else if ws.c != xs.c {
            return Err(shape_err!(
                "conv2d: weight c_in {} does not match input channels {}",
                ws.c,
                xs.c
            ));
        }
        if stride == 2 && (!xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2)) {
            return Err(shape_err!(
                "conv2d: stride 2 needs even height and width, got {}x{}",
                xs.h,
                xs.w
            ));
        }
        let c_out = ws.n;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != c_out {
                return Err(shape_err!("conv2d: bias has {} entries, c_out is {c_out}", bs.len()));
            }
        }
        let geom = PlaneGeom {
            ih: xs.h,
            iw: xs.w,
            oh: xs.h / stride,
            ow: xs.w / stride,
            k,
            stride,
            pad: (k - 1) / 2,
        };
        let out_shape = Shape::new(xs.n, c_out, geom.oh, geom.ow);
        let mut out = Tensor::zeros(out_shape);
        {
            let x = self.value(input);
            let w = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            if depthwise {
                let kk = k * k;
                out.data_mut()
                    .par_chunks_mut(geom.oh * geom.ow)
                    .enumerate()
                    .for_each(|(idx, plane)| {
                        let (n, co) = (idx / c_out, idx % c_out);
                        if let Some(b) = b {
                            plane.fill(b[co]);
                        }
                        conv::correlate_acc(plane, x.plane(n, co), &w[co * kk..(co + 1) * kk], geom);
                    });
            } else {
                let dims = conv::ConvDims {
                    n: xs.n,
                    c_in: xs.c,
                    c_out,
                    g: geom,
                };
                conv::dense_forward(out.data_mut(), x.data(), w, b, dims);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                depthwise,
            },
            rg,
        ))
    }

    /// Doubles height and width, placing inputs at even coordinates and zeros elsewhere.
    pub fn zero_insert_upsample2x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let mut out = Tensor::zeros(s.with_spatial(2 * s.h, 2 * s.w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = x.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for xx in 0..s.w {
                        dst[(2 * y) * (2 * s.w) + 2 * xx] = src[y * s.w + xx];
                    }
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::ZeroInsert(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    /// The 0/1 pattern a ReLU applied to `input` would use.
    pub fn relu_mask(&self, input: Var) -> Tensor<T> {
        self.value(input)
            .map(|v| if v > T::zero() { T::one() } else { T::zero() })
    }

    /// Elementwise product with a constant tensor.
    pub fn mask_mul(&mut self, input: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.value(input).zip_map(&mask, |a, m| a * m)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaskMul { input, mask }, rg))
    }

    /// Instance normalization with population variance; also returns the
    /// statistics it used.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, NormStats<T>)> {
        let s = self.shape(input);
        if s.plane() < 2 {
            return Err(invalid!(
                "instance_norm: plane has {} element(s), need at least 2",
                s.plane()
            ));
        }
        let x = self.value(input);
        let inv_n = T::one() / T::of(s.plane() as f64);
        let mut mean = Vec::with_capacity(s.n * s.c);
        let mut var = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            for c in 0..s.c {
                let p = x.plane(n, c);
                let mu = p.iter().copied().sum::<T>() * inv_n;
                let v = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
                mean.push(mu);
                var.push(v);
            }
        }
        let stats = NormStats { mean, var };
        let out = self.norm_with_stats(input, gamma, beta, eps, &stats, false)?;
        Ok((out, stats))
    }

    /// Affine normalization using externally supplied statistics, which are
    /// treated as constants.
    pub fn frozen_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T, stats: &NormStats<T>) -> Result<Var> {
        self.norm_with_stats(input, gamma, beta, eps, stats, true)
    }

    fn norm_with_stats(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: &NormStats<T>,
        frozen: bool,
    ) -> Result<Var> {
        let s = self.shape(input);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).len() != s.c {
                return Err(shape_err!(
                    "instance_norm: {what} has {} entries, input has {} channels",
                    self.shape(v).len(),
                    s.c
                ));
            }
        }
        if stats.mean.len() != s.n * s.c || stats.var.len() != s.n * s.c {
            return Err(shape_err!(
                "instance_norm: statistics cover {} planes, input has {}",
                stats.mean.len(),
                s.n * s.c
            ));
        }
        let x = self.value(input);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        let mut inv_std = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            for c in 0..s.c {
                let i = n * s.c + c;
                let r = T::one() / (stats.var[i] + eps).sqrt();
                inv_std.push(r);
                let mu = stats.mean[i];
                let src = x.plane(n, c);
                let xh = xhat.plane_mut(n, c);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mu) * r;
                }
                let xh = xhat.plane(n, c).to_vec();
                for (d, v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                    *d = g[c] * v + b[c];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            },
            rg,
        ))
    }

    /// Stacks channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(shape_err!("concat_channels: (n, h, w) differ: {:?} vs {:?}", sa, sb));
        }
        let mut data = Vec::with_capacity(sa.len() + sb.len());
        let (va, vb) = (self.value(a), self.value(b));
        for n in 0..sa.n {
            let per_a = sa.c * sa.plane();
            let per_b = sb.c * sb.plane();
            data.extend_from_slice(&va.data()[n * per_a..(n + 1) * per_a]);
            data.extend_from_slice(&vb.data()[n * per_b..(n + 1) * per_b]);
        }
        let out = Tensor::from_vec(sa.with_channels(sa.c + sb.c), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).scale(factor);
        let rg = self.rg(input);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(out, Op::Sum(input), rg)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let out = Tensor::scalar(d.data().iter().map(|v| v.abs()).sum::<T>() / T::of(d.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::L1(a, b), rg))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let out = Tensor::scalar(d.data().iter().map(|&v| v * v).sum::<T>() / T::of(d.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// `1 - mean windowed SSIM`, images in [0, 1] scaled to [0, 255] internally.
    pub fn neg_ssim_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_shape(vb.shape(), "neg_ssim_loss")?;
        let s = va.shape();
        let planes = s.n * s.c;
        let want = self.rg(a) || self.rg(b);
        let mut total = 0.0;
        let mut grad_a = Vec::with_capacity(if want { s.len() } else { 0 });
        let mut grad_b = Vec::with_capacity(if want { s.len() } else { 0 });
        for n in 0..s.n {
            for c in 0..s.c {
                let pa: Vec<f64> = va.plane(n, c).iter().map(|v| v.as_f64() * 255.0).collect();
                let pb: Vec<f64> = vb.plane(n, c).iter().map(|v| v.as_f64() * 255.0).collect();
                let (m, g) = ssim::ssim_plane(&pa, &pb, s.h, s.w, want)?;
                total += m;
                if let Some((ga, gb)) = g {
                    // d(loss)/dx = -(1/planes) * 255 * d(mean)/d(255 x)
                    let k = -255.0 / planes as f64;
                    grad_a.extend(ga.into_iter().map(|v| T::of(v * k)));
                    grad_b.extend(gb.into_iter().map(|v| T::of(v * k)));
                }
            }
        }
        let loss = 1.0 - total / planes as f64;
        let (grad_a, grad_b) = if want {
            (Tensor::from_vec(s, grad_a)?, Tensor::from_vec(s, grad_b)?)
        } else {
            (Tensor::zeros([0, 0, 0, 0]), Tensor::zeros([0, 0, 0, 0]))
        };
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::NegSsim { a, b, grad_a, grad_b }, want))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d root / d leaf` into every tracked leaf's gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if rs.len() != 1 {
            return Err(Error::NonScalarRoot(rs.as_array()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Tensor::full(rs, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.node_backward(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut pending[v.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv {
                input,
                weight,
                bias,
                stride,
                depthwise,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let xs = x.shape();
                let ws = w.shape();
                let k = ws.h;
                let kk = k * k;
                let gs = g.shape();
                let c_out = ws.n;
                let geom = PlaneGeom {
                    ih: xs.h,
                    iw: xs.w,
                    oh: gs.h,
                    ow: gs.w,
                    k,
                    stride,
                    pad: (k - 1) / 2,
                };
                let dims = conv::ConvDims {
                    n: xs.n,
                    c_in: xs.c,
                    c_out,
                    g: geom,
                };
                if self.rg(input) {
                    let mut gi = Tensor::zeros(xs);
                    let wd = w.data();
                    if depthwise {
                        gi.data_mut()
                            .par_chunks_mut(xs.plane())
                            .enumerate()
                            .for_each(|(idx, plane)| {
                                let (n, ci) = (idx / xs.c, idx % xs.c);
                                conv::correlate_adjoint_acc(plane, g.plane(n, ci), &wd[ci * kk..(ci + 1) * kk], geom);
                            });
                    } else {
                        conv::dense_backward_input(gi.data_mut(), g.data(), wd, dims);
                    }
                    out.push((input, gi));
                }
                if self.rg(weight) {
                    let mut gw = Tensor::zeros(ws);
                    if depthwise {
                        gw.data_mut().par_chunks_mut(kk).enumerate().for_each(|(co, gk)| {
                            for n in 0..xs.n {
                                conv::correlate_kernel_grad_acc(gk, g.plane(n, co), x.plane(n, co), geom);
                            }
                        });
                    } else {
                        conv::dense_backward_weight(gw.data_mut(), g.data(), x.data(), dims);
                    }
                    out.push((weight, gw));
                }
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    let bs = self.shape(b);
                    let mut gb = Tensor::zeros(bs);
                    for co in 0..c_out {
                        let mut acc = T::zero();
                        for n in 0..gs.n {
                            acc += g.plane(n, co).iter().copied().sum::<T>();
                        }
                        gb.data_mut()[co] = acc;
                    }
                    out.push((b, gb));
                }
            }
            &Op::ZeroInsert(input) => {
                let s = self.shape(input);
                let gi = Tensor::from_fn(s, |n, c, y, x| g.at(n, c, 2 * y, 2 * x));
                out.push((input, gi));
            }
            &Op::Relu(input) => {
                let gi = self
                    .value(input)
                    .zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() })?;
                out.push((input, gi));
            }
            Op::MaskMul { input, mask } => {
                out.push((*input, g.zip_map(mask, |g, m| g * m)?));
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            } => {
                let s = xhat.shape();
                let gam = self.value(*gamma).data();
                let np = s.plane();
                let inv_n = T::one() / T::of(np as f64);
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                let mut gi = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let r = inv_std[n * s.c + c];
                        let gp = g.plane(n, c);
                        let xh = xhat.plane(n, c);
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for (&gv, &xv) in gp.iter().zip(xh) {
                            sum_g += gv;
                            sum_gx += gv * xv;
                        }
                        dgamma[c] += sum_gx;
                        dbeta[c] += sum_g;
                        let gr = gam[c] * r;
                        let dst = gi.plane_mut(n, c);
                        if *frozen {
                            for (d, &gv) in dst.iter_mut().zip(gp) {
                                *d = gr * gv;
                            }
                        } else {
                            // dx = gamma r (g - mean(g) - xhat mean(g xhat))
                            let mg = sum_g * inv_n;
                            let mgx = sum_gx * inv_n;
                            for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xh) {
                                *d = gr * (gv - mg - xv * mgx);
                            }
                        }
                    }
                }
                out.push((*input, gi));
                out.push((*gamma, Tensor::from_vec(self.shape(*gamma), dgamma)?));
                out.push((*beta, Tensor::from_vec(self.shape(*beta), dbeta)?));
            }
            &Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let mut ga = Vec::with_capacity(sa.len());
                let mut gb = Vec::with_capacity(sb.len());
                let per_a = sa.c * sa.plane();
                let per_b = sb.c * sb.plane();
                for n in 0..sa.n {
                    let base = n * (per_a + per_b);
                    ga.extend_from_slice(&g.data()[base..base + per_a]);
                    gb.extend_from_slice(&g.data()[base + per_a..base + per_a + per_b]);
                }
                out.push((a, Tensor::from_vec(sa, ga)?));
                out.push((b, Tensor::from_vec(sb, gb)?));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.scale(-T::one())));
            }
            &Op::Scale(input, f) => out.push((input, g.scale(f))),
            &Op::Sum(input) => out.push((input, Tensor::full(self.shape(input), g.item()))),
            &Op::L1(a, b) => {
                let k = g.item() / T::of(self.shape(a).len() as f64);
                let d = self.value(a).zip_map(self.value(b), |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    }
                })?;
                out.push((b, d.scale(-T::one())));
                out.push((a, d));
            }
            &Op::Mse(a, b) => {
                let k = T::of(2.0) * g.item() / T::of(self.shape(a).len() as f64);
                let d = self.value(a).zip_map(self.value(b), |x, y| (x - y) * k)?;
                out.push((b, d.scale(-T::one())));
                out.push((a, d));
            }
            Op::NegSsim { a, b, grad_a, grad_b } => {
                out.push((*a, grad_a.scale(g.item())));
                out.push((*b, grad_b.scale(g.item())));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_dirac_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_fn([1, 2, 5, 6], |_, c, y, x| (c * 31 + y * 7 + x) as f32 * 0.1);
        let mut w = Tensor::zeros([2, 2, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        w.set(1, 1, 1, 1, 1.0);
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, None, 1, false).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_stride2_single_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 2, false).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(tape.value(y).item(), 10.0);
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 5, 6]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let e = tape.conv2d(x, w, None, 1, false).unwrap_err().to_string();
        assert!(e.contains("c_in"), "{e}");
        let w = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        let e = tape.conv2d(x, w, None, 2, false).unwrap_err().to_string();
        assert!(e.contains("even"), "{e}");
        let w = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, false).is_err());
        let w = tape.constant(Tensor::zeros([2, 2, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, true).is_err());
    }

    #[test]
    fn zero_insert_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(5.0));
        let y = tape.zero_insert_upsample2x(x);
        assert_eq!(tape.value(y).data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_insert_then_box_conv_counts_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 4, 4], 1.5));
        let up = tape.zero_insert_upsample2x(x);
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(up, w, None, 1, false).unwrap();
        let v = tape.value(y);
        // interior windows centered on odd/odd positions see four nonzero
        // taps, odd/even two, even/even one
        for yy in 1..7 {
            for xx in 1..7 {
                let taps = [1.0, 2.0][yy % 2] * [1.0, 2.0][xx % 2];
                assert_eq!(v.at(0, 0, yy, xx), taps * 1.5, "({yy},{xx})");
            }
        }
        assert_eq!(tape.value(up).sum(), tape.value(x).sum());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.relu_mask(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn instance_norm_constant_plane_and_unit_variance() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full([1, 1, 1, 2], 1.0));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 2]));
        let x = tape.constant(Tensor::full([1, 2, 3, 3], 4.0));
        let (y, stats) = tape.instance_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![4.0, 4.0]);

        let x = tape.constant(Tensor::from_fn([1, 2, 4, 4], |_, c, y, x| ((c + 3) * y * y + x) as f64));
        let (y, _) = tape.instance_norm(x, g, b, 0.0).unwrap();
        for c in 0..2 {
            let p = tape.value(y).plane(0, c);
            let m: f64 = p.iter().sum::<f64>() / 16.0;
            let v: f64 = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 16.0;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4);
        }
        let tiny = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        assert!(tape.instance_norm(tiny, g, b, 1e-5).is_err());
    }

    #[test]
    fn concat_shapes_and_split() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::from_fn([2, 2, 4, 4], |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f32);
        let b = Tensor::from_fn([2, 3, 4, 4], |n, c, y, x| -((n * 1000 + c * 100 + y * 10 + x) as f32));
        let av = tape.param(a.clone());
        let bv = tape.param(b.clone());
        let c = tape.concat_channels(av, bv).unwrap();
        assert_eq!(tape.shape(c), Shape::new(2, 5, 4, 4));
        assert_eq!(tape.value(c).plane(1, 2), b.plane(1, 0));
        let empty = tape.constant(Tensor::zeros([2, 0, 4, 4]));
        let same = tape.concat_channels(av, empty).unwrap();
        assert_eq!(tape.value(same), &a);
        let bad = tape.constant(Tensor::zeros([2, 1, 2, 4]));
        assert!(tape.concat_channels(av, bad).is_err());

        // backward splits a copy of the incoming gradient back out
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(av), Tensor::full(a.shape(), 1.0));
        assert_eq!(tape.grad(bv), Tensor::full(b.shape(), 1.0));
    }

    #[test]
    fn losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 1, 2], &[1.0, -3.0]));
        let z = tape.constant(Tensor::zeros([1, 1, 1, 2]));
        let l = tape.l1_loss(x, x).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = tape.l1_loss(x, z).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let a = tape.constant(Tensor::scalar(0.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let m = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
        assert!(tape.mse_loss(a, x).is_err());
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y + x) as f64));
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).data().iter().all(|&v| v == 2.0));
        tape.backward(s).unwrap();
        assert!(tape.grad(x).data().iter().all(|&v| v == 4.0));
        tape.zero_grad();
        assert!(tape.grad(x).data().iter().all(|&v| v == 0.0));
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn neg_ssim_of_identical_images_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 16, 16], |_, c, y, x| {
            ((c * 7 + y * 3 + x * x) % 17) as f64 / 17.0
        }));
        let l = tape.neg_ssim_loss(x, x).unwrap();
        assert!(tape.value(l).item().abs() <= 1e-6);
        let small = tape.constant(Tensor::zeros([1, 1, 8, 16]));
        assert!(tape.neg_ssim_loss(small, small).is_err());
    }
}
