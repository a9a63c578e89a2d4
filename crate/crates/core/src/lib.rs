//! Differentiable Gaussian splatting for two articulated hands and a rigid
//! object seen by a single moving camera.

pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod hand;
pub mod hull;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod ply;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
