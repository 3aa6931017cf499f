//! Self-supervised monocular scene reconstruction at desk scale.
//!
//! A single posed RGB sequence trains a conditioned radiance field with
//! photometric and reprojection losses; a Gaussian-mixture ray sampler keeps
//! inference cheap; fused novel-view depths produce TSDF volumes, occupancy
//! grids and meshes.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod field;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod mc_tables;
pub mod metrics;
pub mod nn;
pub mod prsamp;
pub mod recon;
pub mod render;
pub mod scenegen;

pub use error::{Error, Result};
