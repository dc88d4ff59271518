//! Weakly supervised classification of whole-slide images with
//! attention-based multiple instance learning: tissue tiling, patch
//! feature bags, four MIL heads trained with AdamW, ROC evaluation, and
//! attention heatmaps.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod features;
pub mod heatmap;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
