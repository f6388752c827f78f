//! Trajectory representation learning with probabilistic latents.
//!
//! Partial observations of continuous-time spatial trajectories (segments)
//! are encoded as distributions in latent space — diagonal Gaussians or
//! Gumbel boxes — trained self-supervised with a triplet objective over a
//! taxonomy of segment relationships, and decoded at arbitrary query times.
//!
//! Module map:
//! - [`latent`]: distribution families and their differentiable algebra
//!   (product/intersection, divergences, conditionals, sampling)
//! - [`data`]: trajectory model, JSONL I/O, normalization, synthetic
//!   generators, segment sampling
//! - [`pairs`]: the 16-role relationship taxonomy, pair labeling, triplet
//!   sampling
//! - [`model`]: set-transformer encoder and continuous-time decoder
//! - [`train`]: losses, schedule, AdamW, training loop, checkpoints
//! - [`infer`]: prediction, interpolation, evaluation curves, latent edits
//! - [`config`]: run configuration, stable hashing, dotted-path overrides

pub mod config;
pub mod data;
pub mod infer;
pub mod latent;
pub mod model;
pub mod pairs;
pub mod train;

mod error;

pub use error::TrajError;

pub type Result<T> = std::result::Result<T, TrajError>;
