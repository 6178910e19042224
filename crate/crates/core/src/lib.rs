//! Fusion of frozen self-supervised speech models.
//!
//! Upstream models are represented by precomputed per-layer hidden states
//! ([`stackio`]). A trainable fusion layer ([`fusion`]) combines them either at
//! the feature level (one weighted sum feeding one head) or at the probability
//! level (per-model branches whose posteriors are mixed), and a small
//! downstream head ([`heads`]) maps the result to task posteriors.
//! [`trainer`] fits layer weights and heads with the upstream frozen.

pub mod config;
pub mod error;
pub mod evalreport;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod stackio;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use fusion::{FusionMode, FusionParams};
pub use stackio::{LayerStack, Manifest, TaskKind};
