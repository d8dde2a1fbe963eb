//! Differentiable tensorial radiance field with dynamic coefficient
//! decomposition for view-dependent appearance.
//!
//! The pipeline: a vector-matrix factorized field supplies density and
//! appearance features; appearance features project onto a compact neural
//! basis; a FiLM-modulated coefficient network turns view direction (and
//! optional illumination codes) into blending coefficients; a small
//! integrator network fuses coefficients and basis into radiance, which a
//! volume renderer composites along camera rays. Everything trains end to
//! end through a tape-based reverse-mode gradient engine.

pub mod appearance;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod render;
pub mod scene_io;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
