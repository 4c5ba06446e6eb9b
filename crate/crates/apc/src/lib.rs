//! Attribute prompt composition for object re-identification, exercised on a
//! synthetic multi-domain attribute world.
//!
//! The crate provides:
//! - a small taped autodiff core ([`numerics`]),
//! - a planted-attribute synthetic ReID universe ([`synthworld`]),
//! - toy visual/text encoders ([`encoders`]),
//! - the attribute prompt generator: dictionary, orthogonality regularizer,
//!   Top-K gating and the two-stage composition module ([`apg`]),
//! - fast–slow EMA training with prototype contrastive supervision ([`fsts`]),
//! - identity/triplet/total objectives ([`losses`]),
//! - retrieval evaluation and interpretability probes ([`eval`]),
//! - the training harness, ablation runner and CLI ([`harness`], [`cli`]).

pub mod apg;
pub mod checkpoint;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fsts;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod synthworld;

pub use error::{Error, Result};
