//! Uncertainty-aware adapters for a desk-scale segment-anything model.
//!
//! A frozen ViT-style backbone ([`sam`]) is fine-tuned through a chain of
//! small adapters ([`adapter`]) that inject a latent sample drawn from a
//! conditional Gaussian prior/posterior pair ([`latent`]). Repeated draws give
//! diverse segmentation hypotheses which are fused by majority vote
//! ([`metrics`]).

pub mod adapter;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sam;
pub mod training;

pub use error::{Error, Result};
