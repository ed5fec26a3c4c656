//! Camera-only bird's-eye-view segmentation with a geographically masked
//! convolutional GRU, implemented from scratch on a small `f64` tensor type.
//!
//! The pipeline: each camera image is encoded into features and a depth
//! distribution, lifted along its frustum and sum-pooled into a BEV grid
//! ([`lift_splat`]); a window of BEV maps is fused by a ConvGRU
//! ([`convgru`]) whose output is down-weighted where no camera can see
//! ([`geo_mask`]); a small head predicts per-cell classes ([`model`]).
//! [`world`] renders synthetic multi-camera scenes with exact ground truth.

pub mod ablate;
pub mod adam;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod convgru;
pub mod dataset;
pub mod error;
pub mod geo_mask;
pub mod gradcheck;
pub mod gtns;
pub mod lift_splat;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod world;

pub use config::{Config, TemporalModule};
pub use error::{Error, Result};
pub use tensor::Tensor;
