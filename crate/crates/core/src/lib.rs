//! Free multimodal adversarial training on a toy single-stream transformer.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors with
//!   reverse-mode differentiation and finite-difference verification.
//! - [`model`]: the fused image/text transformer with perturbation
//!   injection points and attention maps.
//! - [`adversary`]: embedding-space perturbations, PGD ascent and
//!   Frobenius-ball projection.
//! - [`objectives`]: cross-entropy, symmetric KL and the per-modality
//!   adversarial branch losses.
//! - [`train`], [`optim`], [`checkpoint`]: the free adversarial training
//!   loop, its baselines, and the two-stage pre-train/finetune workflow.
//! - [`synth`]: the synthetic concept world that stands in for real data.
//! - [`metrics`], [`probe`]: CSV logging and attention probing.

pub mod adversary;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{frobenius_norm, Tensor};
