//! Difficulty-balanced generative pretraining for tabular CTR models.
//!
//! The crate implements, at desk scale:
//! - a synthetic heterogeneous tabular benchmark with planted per-field
//!   reconstruction difficulty ([`schema`]),
//! - type-specific field encoders with empirical-CDF binning ([`encode`]),
//! - an absorbing-state masking process with per-field cosine schedules
//!   ([`diffusion`]),
//! - a denoising network whose attention queries are scaled by learned
//!   per-field log-difficulty parameters ([`denoiser`]),
//! - the self-balancing uncertainty-weighted loss and its equilibrium
//!   diagnostics ([`balance`]),
//! - the two-stage train/fine-tune pipeline with ablation variants
//!   ([`train`]) and evaluation metrics ([`metrics`]).
//!
//! Gradients are exact, computed with a minimal reverse-mode tape ([`tape`]).

pub mod balance;
pub mod denoiser;
pub mod diffusion;
pub mod encode;
pub mod error;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod schema;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
