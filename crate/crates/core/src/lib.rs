//! Desk-scale cross-lingual adapter for a flow-matching MMDiT.
//!
//! The core is generic over the floating-point type through [`Scalar`];
//! `*32`/`*64` aliases fix the precision.

pub mod alignloss;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod evalbench;
pub mod flowmatch;
pub mod imageio;
pub mod layers;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod textcond;
pub mod toy2d;
pub mod trainer;

pub use backbone::{ClabMode, Model, Model32, Model64, ModelConfig};
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
