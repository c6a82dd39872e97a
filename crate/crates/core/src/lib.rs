//! Detection transformer with an interpretable prototype bottleneck.
//!
//! The pieces compose bottom-up: [`tensor`] is a small reverse-mode autodiff
//! engine, [`neck`] and [`detr`] build the model on top of it, [`losses`]
//! and [`train`] fit it, and [`metrics`], [`viz`] and [`explain`] inspect it.

pub mod activations;
pub mod bbox;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cputime;
pub mod data;
pub mod detr;
pub mod error;
pub mod eval;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod params;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
