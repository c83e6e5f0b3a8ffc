//! Gloss-to-pose generation with a conditional diffusion denoiser that sees
//! each pose both as joint coordinates and as per-bone direction/length
//! attributes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acd;
pub mod data;
pub mod diffusion;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod exec;
pub mod numeric;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
