//! Cross-embodiment action alignment and guided policy adaptation, desk scale.
//!
//! Two transformer action-chunk VAEs map heterogeneous planar-arm action
//! distributions into one latent space (the adaptation VAE is pulled toward
//! the pre-training latent Gaussian, which is mode-seeking); diffusion and
//! flow-matching chunk policies are then fine-tuned with a latent-space
//! guidance gradient added to their denoising / velocity objectives.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`params`], [`graph`], [`nn`]: reverse-mode
//!   autodiff engine and network blocks (f64 throughout)
//! - [`toy_env`]: planar 2/3/4-link reach and push environments with
//!   scripted inverse-kinematics experts
//! - [`corpus`]: synthetic trajectory corpora, chunking, normalization,
//!   binary persistence
//! - [`vae`]: the two chunk VAEs, KL/MMD machinery, latent prior stats
//! - [`schedule`], [`policy`]: noise schedules, diffusion and flow-matching
//!   chunk generators
//! - [`guidance`]: latent guidance gradient, score/velocity calibration,
//!   steered training objectives
//! - [`kl_oracle`]: quadrature KL fitting of a Gaussian against a mixture
//!   (verification harness for the mode-seeking claim)
//! - [`config`], [`report`], [`pipeline`]: run configuration, CSV/SVG
//!   reporting, and the end-to-end training/eval pipeline

pub mod corpus;
pub mod error;
pub mod graph;
pub mod nn;
pub mod params;
pub mod rng;
pub mod toy_env;
pub mod tape;
pub mod tensor;

pub use error::{AteError, Result};
pub use tensor::Tensor;
