//! Back-projection pipeline (BPP) networks.
//!
//! A BPP network keeps one feature state per resolution level and updates
//! all of them in every block, lowest resolution first. Residuals travel
//! upwards in scale through flux units, so after initialization a level
//! never depends on the levels above it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod analysis;
pub mod autodiff;
pub mod bpp;
mod error;
pub mod image_io;
pub mod resample;
mod scalar;
mod ssim;
pub mod tensor;
pub mod tile;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Bpp32 = bpp::Bpp<f32>;
pub type Bpp64 = bpp::Bpp<f64>;
