//! Zero-shot anomaly change detection for time-series remote-sensing rasters.
//!
//! Detection runs in two stages:
//!
//! 1. [`stage1`] finds every change between the most recent historical image
//!    `T_1` and the current image `X`, comparing instance masks in embedding
//!    space in both temporal directions.
//! 2. [`stage2`] compares the strongest change instances against *all*
//!    historical steps and keeps only those whose current state matches no
//!    historical state; recurring changes are suppressed.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choice.

pub mod baselines;
pub mod cache;
pub mod embed;
pub mod error;
pub mod eval;
pub mod maps;
pub mod pipeline;
pub mod scalar;
pub mod scene;
pub mod segment;
pub mod stage1;
pub mod stage2;
pub mod synth;

pub use embed::{distance, EmbeddingMap, Metric};
pub use error::{Error, Result};
pub use maps::{BinaryMap, ChangeDensityMap};
pub use pipeline::{Pipeline, RunConfig};
pub use scalar::Scalar;
pub use scene::{Raster, TileSpec, TimeSeriesScene};

pub type Raster32 = Raster<f32>;
pub type Raster64 = Raster<f64>;
pub type Scene32 = TimeSeriesScene<f32>;
pub type Scene64 = TimeSeriesScene<f64>;
pub type EmbeddingMap32 = EmbeddingMap<f32>;
pub type EmbeddingMap64 = EmbeddingMap<f64>;
pub type DensityMap32 = ChangeDensityMap<f32>;
pub type DensityMap64 = ChangeDensityMap<f64>;
pub type Pipeline32 = Pipeline<f32>;
pub type Pipeline64 = Pipeline<f64>;
