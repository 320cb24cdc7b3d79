//! Inspection tools: residual-magnitude heatmaps, affine decomposition of a
//! trained network around an input, and reference image-quality metrics.

mod heatmap;
mod linearscope;
mod metrics;

pub use crate::ssim::{SSIM_C1, SSIM_C2};
pub use heatmap::{residual_heatmap, ResidualHeatmap};
pub use linearscope::{capture, decompose, frozen_forward, Decomposition, FrozenNet};
pub use metrics::{luma, mse, psnr, psnr_from_mse, ssim, MetricMode};
