//! Supervised restoration training at desk scale.

mod checkpoint;
mod data;
mod optim;
mod synth;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use data::{crop_multiple, make_pairs, sample_batch, BatchSpec, DataSource, Dataset, DatasetSpec, Pair};
pub use optim::{adam_step, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use synth::{corpus_seed, synth_image};

use serde::{Deserialize, Serialize};

use crate::analysis::{mse, psnr_from_mse, MetricMode};
use crate::bpp::{Bpp, BppConfig, Pass};
use crate::error::{invalid, Error, Result};
use crate::tile::{plan_tiles, stitch};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    L1,
    NegSsim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub bpp: BppConfig,
    pub loss: Loss,
    pub batch: usize,
    pub patch: usize,
    pub steps: u64,
    pub lr0: f64,
    pub lr_half_every: u64,
    pub seed: u64,
    pub augment: bool,
    /// Validation cadence in steps.
    pub val_every: u64,
    /// Intermediate checkpoint cadence in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Validate by tiled inference with training-size patches at this
    /// stride; 0 runs whole images through the network instead.
    pub val_stride: usize,
    /// Multiplies the initial synthesis weights. Small values start training
    /// near the identity map (output = input); 0 starts exactly there.
    pub synthesis_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bpp: BppConfig::paper(),
            loss: Loss::L1,
            batch: 16,
            patch: 96,
            steps: 1000,
            lr0: 1e-4,
            lr_half_every: 200_000,
            seed: 0,
            augment: true,
            val_every: 100,
            checkpoint_every: 0,
            val_stride: crate::tile::DEFAULT_STRIDE,
            synthesis_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bpp.validate()?;
        let a = self.bpp.alignment();
        if self.patch == 0 || !self.patch.is_multiple_of(a) {
            return Err(invalid!(
                "patch {} must be a positive multiple of {a} (2^(levels-1))",
                self.patch
            ));
        }
        if self.batch == 0 {
            return Err(invalid!("batch must be >= 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(invalid!("lr0 must be positive"));
        }
        if self.lr_half_every == 0 || self.val_every == 0 {
            return Err(invalid!("lr_half_every and val_every must be >= 1"));
        }
        if !(self.synthesis_scale.is_finite() && self.synthesis_scale >= 0.0) {
            return Err(invalid!("synthesis_scale must be finite and non-negative"));
        }
        if self.val_stride > self.patch {
            return Err(invalid!("val_stride {} exceeds patch {}", self.val_stride, self.patch));
        }
        Ok(())
    }

    /// `(patch, stride)` for validation inference, if tiled.
    pub fn val_tiling(&self) -> Option<(usize, usize)> {
        (self.val_stride > 0).then_some((self.patch, self.val_stride))
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch: self.batch,
            patch: self.patch,
            augment: self.augment,
            // decorrelate sampling from weight initialization
            seed: self.seed ^ 0x5bd1_e995_0000_0001,
        }
    }
}

/// Validation summary: mean MSE (255 scale) and mean PSNR over held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eval {
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub mse: f64,
    pub psnr: f64,
}

/// CSV with header `step,mse,psnr`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,mse,psnr\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.mse, r.psnr));
    }
    s
}

fn summarize(errors: Vec<f64>) -> Result<Eval> {
    if errors.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    let n = errors.len() as f64;
    Ok(Eval {
        mse: errors.iter().sum::<f64>() / n,
        psnr: errors.iter().map(|&e| psnr_from_mse(e)).sum::<f64>() / n,
    })
}

/// Whole-image forward, or Hamming-blended tiles of `(patch, stride)`.
pub fn restore<T: Scalar>(
    net: &Bpp<T>,
    x: &crate::Tensor<T>,
    tiling: Option<(usize, usize)>,
) -> Result<crate::Tensor<T>> {
    match tiling {
        None => net.forward(x),
        Some((patch, stride)) => {
            let s = x.shape();
            let plan = plan_tiles(s.h, s.w, patch, stride)?;
            stitch(|t| net.forward(t), x, &plan)
        }
    }
}

/// Network output vs ground truth on every validation pair and factor.
pub fn evaluate<T: Scalar>(net: &Bpp<T>, val: &[Pair<T>], tiling: Option<(usize, usize)>) -> Result<Eval> {
    let mut errs = Vec::new();
    for p in val {
        for (_, x) in &p.impaired {
            errs.push(mse(&restore(net, x, tiling)?, &p.gt, MetricMode::Rgb)?);
        }
    }
    summarize(errs)
}

/// The impaired (bicubic) images themselves vs ground truth.
pub fn baseline<T: Scalar>(val: &[Pair<T>]) -> Result<Eval> {
    let mut errs = Vec::new();
    for p in val {
        for (_, x) in &p.impaired {
            errs.push(mse(x, &p.gt, MetricMode::Rgb)?);
        }
    }
    summarize(errs)
}

/// Batch loss of `net` on `(input, target)`, with gradients for every parameter.
pub fn loss_and_grads<T: Scalar>(
    net: &Bpp<T>,
    loss: Loss,
    input: &crate::Tensor<T>,
    target: &crate::Tensor<T>,
) -> Result<(f64, Vec<crate::Tensor<T>>)> {
    let mut pass = Pass::new(net, true);
    let x = pass.tape.constant(input.clone());
    let y = pass.run(x)?;
    let t = pass.tape.constant(target.clone());
    let l = match loss {
        Loss::L1 => pass.tape.l1_loss(y, t)?,
        Loss::NegSsim => pass.tape.neg_ssim_loss(y, t)?,
    };
    let value = pass.tape.value(l).item().as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    pass.tape.backward(l)?;
    let grads = pass.param_vars().iter().map(|&v| pass.tape.grad(v)).collect();
    Ok((value, grads))
}

pub struct TrainOutcome<T> {
    pub net: Bpp<T>,
    pub adam: AdamState<T>,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Training-batch loss before each update.
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` Adam updates from a fresh seeded initialization.
///
/// Validation rows are logged at step 0, every `val_every` steps and after
/// the last step. `on_checkpoint` sees every intermediate checkpoint.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset<T>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut net = Bpp::<T>::new(cfg.bpp.clone(), cfg.seed)?;
    if cfg.synthesis_scale != 1.0 {
        net.scale_synthesis(cfg.synthesis_scale);
    }
    let mut adam = AdamState::new(&net.params.tensors);
    let bs = cfg.batch_spec();
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        if step % cfg.val_every == 0 {
            let e = evaluate(&net, &data.val, cfg.val_tiling())?;
            log.push(LogRow {
                step,
                mse: e.mse,
                psnr: e.psnr,
            });
        }
        let (input, target) = sample_batch(data, &bs, step)?;
        let (value, grads) = loss_and_grads(&net, cfg.loss, &input, &target)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(value);
        adam_step(
            &mut net.params.tensors,
            &grads,
            &mut adam,
            lr_schedule(step, cfg.lr0, cfg.lr_half_every),
        )?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(&Checkpoint::new(&net, step + 1, cfg.seed, Some(&adam)))?;
        }
    }
    let e = evaluate(&net, &data.val, cfg.val_tiling())?;
    log.push(LogRow {
        step: cfg.steps,
        mse: e.mse,
        psnr: e.psnr,
    });
    let checkpoint = Checkpoint::new(&net, cfg.steps, cfg.seed, Some(&adam));
    Ok(TrainOutcome {
        net,
        adam,
        checkpoint,
        log,
        losses,
    })
}
