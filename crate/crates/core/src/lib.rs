//! Flow-matching generation for electrical load profiles.
//!
//! One velocity network, trained once for conditional generation, covers four
//! tasks at inference time: free conditional generation, peak/min/average
//! constrained generation, imputation of missing blocks, and block-average
//! super-resolution. The last three are handled by projection-based guidance
//! during ODE sampling, so no re-training is needed.
//!
//! Module map:
//! - [`data`]: profile containers, condition encoding, normalization, padding,
//!   dataset ingestion and a synthetic load-profile generator.
//! - [`nn`]: the transformer velocity network with aligned positional
//!   embedding, valid-step masking and adaptive layer-norm conditioning, plus
//!   exact reverse-mode gradients for every parameter.
//! - [`flow`]: conditional flow-matching training, Euler ODE sampling, and
//!   projection guidance.
//! - [`tasks`]: the three projection operators plugged into guidance.
//! - [`metrics`]: MMD with permutation testing, CRPS, peak-load error,
//!   condition RMSE.
//! - [`baselines`]: interpolation baselines and the algebraic scaler.

pub mod baselines;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
