//! Adversarial robustness toolkit built on a from-scratch reverse-mode
//! autodiff core.
//!
//! The crate trains image classifiers under several defense procedures —
//! plain cross-entropy, noise-augmented logit pairing/squeezing, GAN-style
//! minimax training against a source discriminator, and online adversarial
//! training — then evaluates them against white-box gradient attacks (FGSM,
//! BIM, PGD) with ℓ∞ budgets and valid-pixel clipping. A harness module
//! orchestrates seeded end-to-end experiments with accuracy, timing and
//! convergence reporting.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `gandef` binary exposes the same
//! functionality as subcommands.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, NodeId, Op, Tensor};
