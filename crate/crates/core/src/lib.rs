//! Adversarial fine-tuning of toy dual encoders with text-image mutual
//! awareness.
//!
//! The crate is `no_std` (with `alloc`) and purely computational:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode differentiation tape.
//! - [`model`]: a small image encoder plus a class-embedding "text" encoder.
//! - [`losses`]: hyperspherical energy, the two distillation terms, the
//!   text-distance adaptive margin, and their weighted composition.
//! - [`attacks`]: l∞ projected gradient descent and robust accuracy.
//! - [`data`]: a seeded hierarchical synthetic image dataset.
//! - [`harness`]: clean pretraining, adversarial fine-tuning variants, and
//!   evaluation / diagnostic matrices.
//!
//! File formats, reports and the command-line tool live in `tima-lab`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attacks;
pub mod data;
mod error;
pub mod harness;
pub mod losses;
mod math;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
