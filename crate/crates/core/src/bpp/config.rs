use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How convolution weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// He-style Gaussian, relying on instance norm to balance activations.
    #[default]
    InDefault,
    /// Identity (Dirac) kernels plus Gaussian noise.
    DiracNoise,
}

/// Structural hyperparameters of a BPP network.
///
/// Levels are numbered from the lowest resolution; `channels[0]` belongs to
/// level 1 and `channels[levels - 1]` to the full-resolution level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BppConfig {
    pub levels: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub use_instance_norm: bool,
    pub init_scheme: InitScheme,
    pub noise_sigma: f64,
    /// Hidden width multiplier inside the Update and Upscale modules.
    pub expansion: usize,
    /// Keep the level-1 state fixed across blocks.
    pub freeze_lowest_update: bool,
    /// Replace every Update module by the identity (`x_out = x_in + e_in`).
    pub identity_update_mode: bool,
}

impl Default for BppConfig {
    fn default() -> Self {
        BppConfig::paper()
    }
}

impl BppConfig {
    /// 4 levels, 16 flux blocks, 256/128/64/48 features from low to high resolution.
    pub fn paper() -> Self {
        BppConfig {
            levels: 4,
            depth: 16,
            channels: vec![256, 128, 64, 48],
            use_instance_norm: true,
            init_scheme: InitScheme::InDefault,
            noise_sigma: 0.01,
            expansion: 1,
            freeze_lowest_update: false,
            identity_update_mode: false,
        }
    }

    /// Defaults everywhere except depth and per-level channels.
    pub fn new(depth: usize, channels: &[usize]) -> Self {
        BppConfig {
            levels: channels.len(),
            depth,
            channels: channels.to_vec(),
            ..BppConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(invalid!("levels must be >= 1"));
        }
        if self.depth < 1 {
            return Err(invalid!("depth must be >= 1"));
        }
        if self.channels.len() != self.levels {
            return Err(invalid!(
                "{} channel counts given for {} levels",
                self.channels.len(),
                self.levels
            ));
        }
        if let Some(k) = self.channels.iter().position(|&c| c == 0) {
            return Err(invalid!("level {} has zero channels", k + 1));
        }
        if self.expansion < 1 {
            return Err(invalid!("expansion must be >= 1"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid!("noise_sigma must be finite and non-negative"));
        }
        if self.levels > 16 {
            return Err(invalid!("levels must be <= 16"));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Whether level `k` (1-based) carries a learned Update module.
    pub fn has_update(&self, level: usize) -> bool {
        !(self.identity_update_mode || (level == 1 && self.freeze_lowest_update))
    }
}
