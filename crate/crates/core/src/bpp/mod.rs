//! The back-projection pipeline network.
//!
//! A forward pass builds an image pyramid, derives per-level states `x_k`
//! and down-projections `p_k`, runs `depth` flux blocks, and adds the
//! synthesized full-resolution residual to the input. Each flux unit at
//! level `k` computes
//!
//! ```text
//! c     = x_in + e_in
//! e_out = Upscale([p_in, c])     (to level k + 1)
//! p_out = Downscale(c)           (to level k - 1)
//! x_out = Update(c)
//! ```
//!
//! and units within a block run from level 1 (lowest resolution) upwards.

mod config;
mod params;

pub use config::{BppConfig, InitScheme};
pub use params::{
    BppParams, ConvSlot, FluxSlots, Layout, NormSlot, ParamSpec, UpdateSlots, UpscaleSlots, IMAGE_CHANNELS,
};

use crate::autodiff::{NormStats, Tape, Var, IN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// A network: structure plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Bpp<T> {
    pub config: BppConfig,
    pub params: BppParams<T>,
}

impl<T: Scalar> Bpp<T> {
    pub fn new(config: BppConfig, seed: u64) -> Result<Self> {
        let params = BppParams::build(&config, seed)?;
        Ok(Bpp { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Inference without gradient tracking.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = Pass::new(self, false);
        let x = pass.tape.constant(input.clone());
        let y = pass.run(x)?;
        Ok(pass.tape.value(y).clone())
    }

    /// Sets synthesis weights and bias to zero, making the network the identity.
    pub fn zero_synthesis(&mut self) {
        let s = self.params.layout.synthesis;
        for idx in std::iter::once(s.weight).chain(s.bias) {
            self.params.tensors[idx].data_mut().fill(T::zero());
        }
    }

    /// Multiplies the synthesis weights by `k`; bias is zeroed when `k == 0`.
    pub fn scale_synthesis(&mut self, k: f64) {
        if k == 0.0 {
            return self.zero_synthesis();
        }
        let w = self.params.layout.synthesis.weight;
        for v in self.params.tensors[w].data_mut() {
            *v = T::of(v.as_f64() * k);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Bpp<U> {
        Bpp {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input(&self, shape: crate::Shape) -> Result<()> {
        if shape.c != IMAGE_CHANNELS {
            return Err(shape_err!("input must have {IMAGE_CHANNELS} channels, got {}", shape.c));
        }
        let a = self.config.alignment();
        if !shape.h.is_multiple_of(a) || !shape.w.is_multiple_of(a) || shape.h == 0 || shape.w == 0 {
            return Err(shape_err!(
                "input {}x{} is not divisible by {a} (2^(levels-1)); pad or crop it first",
                shape.h,
                shape.w
            ));
        }
        Ok(())
    }
}

/// Position of a flux unit: 1-based level (1 = lowest resolution) and block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UnitId {
    pub level: usize,
    pub block: usize,
}

/// A non-linearity's action recorded during a capture pass.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenOp<T> {
    Relu { unit: UnitId, mask: Tensor<T> },
    Norm { unit: UnitId, stats: NormStats<T> },
}

impl<T> FrozenOp<T> {
    pub fn unit(&self) -> UnitId {
        match self {
            FrozenOp::Relu { unit, .. } | FrozenOp::Norm { unit, .. } => *unit,
        }
    }
}

/// Read-only observer of the network dynamics.
pub trait FluxObserver<T: Scalar> {
    /// The residual `e_in` delivered to `level` in `block` (zeros at level 1).
    fn residual(&mut self, _level: usize, _block: usize, _e_in: &Tensor<T>) {}
    /// State `x` of `level` after `block` (block 0 is the initial state).
    fn state(&mut self, _level: usize, _block: usize, _x: &Tensor<T>) {}
}

/// Network state between flux blocks. Vectors are indexed from 0 = level 1.
#[derive(Clone, Debug)]
pub struct PyramidState {
    pub s_a: Vec<Var>,
    pub s_b: Vec<Var>,
    pub x: Vec<Var>,
    pub p: Vec<Var>,
}

/// Outputs of one flux unit.
#[derive(Clone, Copy, Debug)]
pub struct FluxOut {
    pub e_out: Option<Var>,
    pub x_out: Var,
    pub p_out: Option<Var>,
}

enum Nonlinear<'a, T> {
    Live,
    Capture(Vec<FrozenOp<T>>),
    Replay { ops: &'a [FrozenOp<T>], next: usize },
}

/// One forward evaluation of a network on a tape.
pub struct Pass<'a, T: Scalar> {
    net: &'a Bpp<T>,
    pub tape: Tape<T>,
    params: Vec<Var>,
    nonlinear: Nonlinear<'a, T>,
    observer: Option<&'a mut dyn FluxObserver<T>>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    /// Registers the parameters on a fresh tape, as tracked leaves when
    /// `track_params` is set.
    pub fn new(net: &'a Bpp<T>, track_params: bool) -> Self {
        let mut tape = Tape::new();
        let params = net
            .params
            .tensors
            .iter()
            .map(|t| {
                if track_params {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Pass {
            net,
            tape,
            params,
            nonlinear: Nonlinear::Live,
            observer: None,
        }
    }

    pub fn observe(mut self, observer: &'a mut dyn FluxObserver<T>) -> Self {
        self.observer = Some(observer);
        self
    }

    /// Records every ReLU mask and instance-norm statistic in execution order.
    pub fn capturing(mut self) -> Self {
        self.nonlinear = Nonlinear::Capture(Vec::new());
        self
    }

    /// Uses recorded masks and statistics instead of evaluating the
    /// non-linearities, which makes the pass affine in its input.
    pub fn replaying(mut self, ops: &'a [FrozenOp<T>]) -> Self {
        self.nonlinear = Nonlinear::Replay { ops, next: 0 };
        self
    }

    /// The record of a capturing pass.
    pub fn into_capture(self) -> Vec<FrozenOp<T>> {
        match self.nonlinear {
            Nonlinear::Capture(ops) => ops,
            _ => Vec::new(),
        }
    }

    /// Tape variables for the parameters, in layout order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    fn conv(&mut self, x: Var, slot: ConvSlot, stride: usize) -> Result<Var> {
        let w = self.params[slot.weight];
        let b = slot.bias.map(|b| self.params[b]);
        self.tape.conv2d(x, w, b, stride, false)
    }

    fn scaler(&mut self, x: Var, idx: usize) -> Result<Var> {
        let w = self.params[idx];
        self.tape.conv2d(x, w, None, 2, true)
    }

    fn relu(&mut self, x: Var, unit: UnitId) -> Result<Var> {
        match &mut self.nonlinear {
            Nonlinear::Live => Ok(self.tape.relu(x)),
            Nonlinear::Capture(rec) => {
                rec.push(FrozenOp::Relu {
                    unit,
                    mask: self.tape.relu_mask(x),
                });
                Ok(self.tape.relu(x))
            }
            Nonlinear::Replay { ops, next } => match ops.get(*next) {
                Some(FrozenOp::Relu { mask, .. }) => {
                    *next += 1;
                    self.tape.mask_mul(x, mask.clone())
                }
                _ => Err(replay_mismatch(*next, "relu")),
            },
        }
    }

    fn norm(&mut self, x: Var, slot: Option<NormSlot>, unit: UnitId) -> Result<Var> {
        let Some(slot) = slot else { return Ok(x) };
        let (g, b) = (self.params[slot.gamma], self.params[slot.beta]);
        let eps = T::of(IN_EPS);
        match &mut self.nonlinear {
            Nonlinear::Live => Ok(self.tape.instance_norm(x, g, b, eps)?.0),
            Nonlinear::Capture(_) => {
                let (y, stats) = self.tape.instance_norm(x, g, b, eps)?;
                if let Nonlinear::Capture(rec) = &mut self.nonlinear {
                    rec.push(FrozenOp::Norm { unit, stats });
                }
                Ok(y)
            }
            Nonlinear::Replay { ops, next } => match ops.get(*next) {
                Some(FrozenOp::Norm { stats, .. }) => {
                    *next += 1;
                    self.tape.frozen_norm(x, g, b, eps, stats)
                }
                _ => Err(replay_mismatch(*next, "instance norm")),
            },
        }
    }

    /// Builds the image pyramid and the initial states and down-projections.
    pub fn initialize_pyramid(&mut self, input: Var) -> Result<PyramidState> {
        let net = self.net;
        net.check_input(self.tape.shape(input))?;
        let l = net.config.levels;
        let layout = &net.params.layout;
        let mut s_a = vec![input; l];
        for k in (0..l - 1).rev() {
            s_a[k] = self.scaler(s_a[k + 1], layout.scaler_a[k])?;
        }
        let mut x = Vec::with_capacity(l);
        for (k, &s) in s_a.iter().enumerate() {
            x.push(self.conv(s, layout.analysis_a[k], 1)?);
        }
        let mut s_b = Vec::with_capacity(l - 1);
        let mut p = Vec::with_capacity(l - 1);
        for k in 0..l - 1 {
            let s = self.scaler(s_a[k + 1], layout.scaler_b[k])?;
            s_b.push(s);
            p.push(self.conv(s, layout.analysis_b[k], 1)?);
        }
        if let Some(obs) = self.observer.as_deref_mut() {
            for (k, &v) in x.iter().enumerate() {
                obs.state(k + 1, 0, self.tape.value(v));
            }
        }
        Ok(PyramidState { s_a, s_b, x, p })
    }

    /// One flux unit at 1-based `level` in 1-based `block`.
    pub fn flux(
        &mut self,
        e_in: Option<Var>,
        x_in: Var,
        p_in: Option<Var>,
        level: usize,
        block: usize,
    ) -> Result<FluxOut> {
        let slots = self.net.params.layout.flux[block - 1][level - 1];
        let unit = UnitId { level, block };
        let xs = self.tape.shape(x_in);
        for (role, v) in [("e_in", e_in), ("p_in", p_in)] {
            if let Some(v) = v {
                if self.tape.shape(v) != xs {
                    return Err(shape_err!(
                        "level {level} block {block}: {role} {:?} does not match x_in {:?}",
                        self.tape.shape(v),
                        xs
                    ));
                }
            }
        }
        let c = match e_in {
            Some(e) => self.tape.add(x_in, e)?,
            None => x_in,
        };
        let e_out = match slots.upscale {
            Some(up) => {
                let p = match p_in {
                    Some(p) => p,
                    None => self.tape.constant(Tensor::zeros(xs)),
                };
                let cat = self.tape.concat_channels(p, c)?;
                let h = self.conv(cat, up.fuse, 1)?;
                let h = self.norm(h, up.norm, unit)?;
                let h = self.relu(h, unit)?;
                let h = self.tape.zero_insert_upsample2x(h);
                Some(self.conv(h, up.out, 1)?)
            }
            None => None,
        };
        let p_out = match slots.downscale {
            Some(d) => Some(self.conv(c, d, 2)?),
            None => None,
        };
        let x_out = match slots.update {
            Some(u) => {
                let h = self.conv(c, u.expand, 1)?;
                let h = self.norm(h, u.norm, unit)?;
                let h = self.relu(h, unit)?;
                let r = self.conv(h, u.reduce, 1)?;
                self.tape.add(c, r)?
            }
            None => c,
        };
        Ok(FluxOut { e_out, x_out, p_out })
    }

    /// One depth step: a flux unit per level, lowest resolution first.
    pub fn flux_block(&mut self, state: &mut PyramidState, block: usize) -> Result<()> {
        let l = self.net.config.levels;
        let mut e = None;
        for k in 0..l {
            let p_in = (k + 1 < l).then(|| state.p[k]);
            if let Some(obs) = self.observer.as_deref_mut() {
                match e {
                    Some(v) => obs.residual(k + 1, block, self.tape.value(v)),
                    None => obs.residual(k + 1, block, &Tensor::zeros(self.tape.shape(state.x[k]))),
                }
            }
            let out = self.flux(e, state.x[k], p_in, k + 1, block)?;
            state.x[k] = out.x_out;
            if k > 0 {
                state.p[k - 1] = out.p_out.expect("downscale exists above level 1");
            }
            e = out.e_out;
            if let Some(obs) = self.observer.as_deref_mut() {
                obs.state(k + 1, block, self.tape.value(out.x_out));
            }
        }
        Ok(())
    }

    /// Runs all flux blocks from `state` and synthesizes the output.
    pub fn run_from(&mut self, input: Var, mut state: PyramidState) -> Result<Var> {
        for t in 1..=self.net.config.depth {
            self.flux_block(&mut state, t)?;
        }
        let top = *state.x.last().expect("at least one level");
        let residual = self.conv(top, self.net.params.layout.synthesis, 1)?;
        let out = self.tape.add(input, residual)?;
        if let Nonlinear::Replay { ops, next } = &self.nonlinear {
            if *next != ops.len() {
                return Err(replay_mismatch(*next, "end of network"));
            }
        }
        Ok(out)
    }

    /// The complete network: `input + Synthesis(x_L)`.
    pub fn run(&mut self, input: Var) -> Result<Var> {
        let state = self.initialize_pyramid(input)?;
        self.run_from(input, state)
    }
}

fn replay_mismatch(at: usize, expected: &str) -> Error {
    Error::Invalid(format!(
        "frozen record does not match the network: entry {at} should be {expected}"
    ))
}
