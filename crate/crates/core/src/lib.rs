//! Repeat-and-concatenate 2D→3D volume translation.
//!
//! Views are stretched along depth, aligned and stacked into a composite
//! volume; a 3D U-Net maps the composite to a CT-like volume and is trained
//! with a de-biased Sinkhorn divergence on learned features plus a potential
//! (critic) network in an alternating schedule.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod neural;
pub mod projector;
pub mod sinkhorn;
pub mod training;
pub mod volgrid;

pub use error::{Error, Result};
