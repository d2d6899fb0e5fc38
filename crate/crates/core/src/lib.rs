//! Display and rendering power co-optimization for Gaussian-splat scenes.

pub mod commands;
pub mod config;
pub mod curve;
pub mod error;
pub mod foveation;
pub mod plot;
pub mod power;
pub mod prune;
pub mod quality;
pub mod raster;
pub mod scene;

pub use error::{Error, ErrorClass, Result};
