//! LiDAR loop-closure detection: local occupancy mapping, dual BiGAN map
//! features trained with unfamiliarity reweighting, sequence matching and
//! precision/recall evaluation.

pub mod bigan;
pub mod dataset;
mod error;
pub mod eval;
pub mod formats;
pub mod mapper;
pub mod matcher;
pub mod sync;

pub use error::{Error, Result};
