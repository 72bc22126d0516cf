//! Desk-scale laboratory for adversarially robust real/fake classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors plus a define-by-run reverse-mode
//!   autodiff graph and a finite-difference gradient checker,
//! - [`model`]: tiny CNN encoders with L2-normalised embeddings and a
//!   linear classification head,
//! - [`loss`]: logit-adjusted cross-entropy, feature-similarity terms and
//!   the combined training objectives,
//! - [`attack`]: FGSM / PGD / CW-style / transfer attacks under L-inf and
//!   L2 budgets,
//! - [`data`]: a deterministic synthetic clip generator with four
//!   manipulation families and a seven-kind distortion suite,
//! - [`train`]: optimisers and the training loop for all regimes,
//! - [`eval`]: rank-based ROC AUC, video-level aggregation, robust
//!   evaluation and distortion sweeps.
//!
//! Everything is seeded explicitly; identical inputs produce identical
//! artifacts byte for byte (timestamps excluded).

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
