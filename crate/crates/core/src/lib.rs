//! Progressive distillation of diffusion denoisers with relational
//! feature supervision.
//!
//! The crate is organized bottom-up:
//!
//! - [`autograd`]: tape-based reverse-mode differentiation over f64
//!   tensors;
//! - [`nn`], [`optim`]: parameter storage, initializers, Adam with
//!   cosine annealing, EMA shadow weights;
//! - [`schedule`]: the variance-preserving noise schedule, deterministic
//!   sampler steps, and two-step teacher targets for step halving;
//! - [`features`], [`losses`], [`memory`]: feature extraction, the
//!   relational distillation losses with hand-derived gradients, and the
//!   cross-batch pixel embedding queue;
//! - [`denoiser`], [`data`], [`trainer`]: the small denoiser models, the
//!   toy and file-backed datasets, and the training loops (base model,
//!   classifier, step-halving distillation stages);
//! - [`eval`], [`ckpt`]: feature-statistics metrics and checkpoint
//!   containers.

pub mod autograd;
pub mod ckpt;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use schedule::Denoiser;
