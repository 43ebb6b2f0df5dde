//! Latent-space iterative precipitation forecasting, desk scale.
//!
//! Encodes multi-source gridded atmospheric fields into a compact latent
//! state, predicts future latents with interval-1/2/4 predictors under a
//! hierarchical temporal aggregation schedule, projects latents back to
//! precipitation-intensity grids, and trains the stack with a weighted
//! MAE + cross-entropy loss built for extreme class imbalance.

pub mod attribution;
pub mod dataset;
pub mod hta;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod tensor;
