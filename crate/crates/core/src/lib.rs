//! Adversarial semi-supervised segmentation with a re-usable discriminator
//! that drives per-image test-time adaptation.

pub mod augment;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod run;
pub mod training;
pub mod ttt;
#[macro_use]
pub mod rng;

pub use error::{Error, Result};
