//! Training engine for image classification under long-tailed class
//! distributions and noisy labels.
//!
//! The pipeline: [`data`] loads or synthesizes datasets with controlled
//! imbalance and label corruption; [`augment`] produces weak and strong views
//! of each image; [`model`] is a small network whose normalization layers keep
//! separate statistics per augmentation branch; [`criteria`] and [`selection`]
//! implement the loss terms and the per-batch clean/noisy split; [`trainer`]
//! runs the two-stage procedure; [`eval`] measures accuracy and noise
//! detection quality against the hidden ground truth and emits run artifacts.

pub mod augment;
pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod selection;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
