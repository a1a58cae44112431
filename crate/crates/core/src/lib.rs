//! Pixel-level prototype alignment for unsupervised domain adaptation in
//! semantic segmentation, with a synthetic benchmark to exercise it.

pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod io;
pub mod maps;
pub mod numerics;
pub mod prototypes;
pub mod pseudo;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
