//! Negation-aware test-time adaptation for contrastive dual encoders.
//!
//! The crate bundles everything needed to reproduce the dual-concept-shift
//! failure of an affirmatively pretrained text encoder and to repair it by
//! adapting only the affine parameters of the text-side layer norms:
//!
//! - [`world`]: a seeded concept world, caption templates, evaluation splits
//!   and the binary embedding archive format.
//! - [`model`]: tokenizer, a small pre-norm transformer text encoder with
//!   hand-written backpropagation, contrastive pretraining and checkpoints.
//! - [`language`]: rule-based negation decomposition and reversal, plus an
//!   optional chat-completion client.
//! - [`adaptation`]: candidate selection, the three adaptation losses and
//!   the online/offline update loops.
//! - [`evaluation`]: retrieval, multiple-choice, binary and template
//!   classification scoring, MMD and similarity histograms.

pub mod adaptation;
pub mod error;
pub mod evaluation;
pub mod language;
pub mod linalg;
pub mod model;
pub mod world;

pub use error::{NeatError, Result};
