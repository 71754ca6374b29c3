//! 2D U-Net segmentation of cardiac MRI with tooling for measuring how far a
//! model's dice drops between its training cohort, its held-out folds, and an
//! unseen cohort.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod experiments;
pub mod report;
pub mod error;
pub mod rng;
pub mod losses;
pub mod tensor;
pub mod train;
pub mod preprocess;
pub mod unet;

pub use error::{Error, Result};
