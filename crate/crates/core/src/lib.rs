//! Dense outputs from weak image-level labels: synthetic multi-label data,
//! a small classifier zoo, integrated-gradient attributions, boosted mask
//! aggregation, and segmentation pre-training with adapter fine-tuning.

pub mod commands;
pub mod config;
pub mod datagen;
pub mod doll;
pub mod error;
pub mod eval;
pub mod explain;
pub mod formats;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
