//! Stochastic automotive radar sensor models.
//!
//! Learns the conditional distribution of radar power grids given a scene
//! (terrain raster + object list): a conditional VAE with optional
//! adversarial loss, plus per-cell Normal and Gaussian-mixture baselines.
//! A built-in synthetic oracle provides ground truth for training and for
//! the evaluation suite (expected RMSE, radar-range-equation fit, clutter
//! histogram KL divergences).

pub mod dataset;
pub mod oracle;
pub mod nets;
pub mod pgm;
pub mod rng;
pub mod train;
pub mod scene;
